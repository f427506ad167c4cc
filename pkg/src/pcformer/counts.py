"""Closed-form parameter counts that need no tensors (kept torch-free for a fast CLI)."""
from __future__ import annotations

from typing import Sequence

# Prediction head used at full scale: 1152 -> 512 x4 -> 6.
PAPER_HEAD_WIDTHS = (1152, 512, 512, 512, 512, 6)


def head_param_count(widths: Sequence[int]) -> int:
    """Linear + LayerNorm per hidden layer, plain linear output."""
    if len(widths) < 2:
        return 0
    total = 0
    for a, b in zip(widths[:-2], widths[1:-1]):
        total += a * b + b + 2 * b
    return total + widths[-2] * widths[-1] + widths[-1]
