"""Super-token encoder: self-attention followed by exact-halving token merging."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import FeedForward, RopeConfig, SelfAttention, TokenSet
from .substrate import segment_sum


@dataclass(frozen=True, eq=False)
class MergePlan:
    """``dest[j]`` is the output token that input token ``j`` collapses into."""

    dest: np.ndarray
    out_count: int

    def groups(self) -> list[np.ndarray]:
        order = np.argsort(self.dest, kind="stable")
        return np.split(order, np.cumsum(np.bincount(self.dest, minlength=self.out_count))[:-1])


def plan_merge(tokens) -> MergePlan:
    """Bipartite greedy matching of odd-index tokens onto even-index tokens.

    Odd tokens are visited in ascending order and each takes the still-free
    even token with the highest cosine similarity (lowest index on ties), so
    every output holds one or two inputs and the count is exactly ceil(M/2).
    Zero vectors have similarity -inf to everything.
    """
    h = tokens.detach().double().cpu().numpy() if isinstance(tokens, torch.Tensor) else np.asarray(tokens, float)
    m = len(h)
    if m < 1:
        raise ValueError("cannot merge an empty token set")
    a_idx = np.arange(0, m, 2)
    b_idx = np.arange(1, m, 2)
    norms = np.linalg.norm(h, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = h / norms[:, None]
    sim = unit[b_idx] @ unit[a_idx].T
    zero = norms == 0
    sim[zero[b_idx], :] = -np.inf
    sim[:, zero[a_idx]] = -np.inf
    dest = np.empty(m, dtype=np.int64)
    dest[a_idx] = np.arange(len(a_idx))
    free = np.ones(len(a_idx), dtype=bool)
    for row, b in enumerate(b_idx):
        cand = np.where(free, sim[row], -np.inf)
        best = int(np.argmax(cand))
        if not free[best]:
            # every free candidate scored -inf; fall back to the lowest free index
            best = int(np.flatnonzero(free)[0])
        free[best] = False
        dest[b] = best
    return MergePlan(dest, len(a_idx))


def merge(ts: TokenSet, plan: MergePlan, mlp: nn.Module | None = None) -> TokenSet:
    """Multiplicity-weighted averages of tokens and anchors over each merge group."""
    dest = torch.as_tensor(plan.dest, dtype=torch.long)
    m = ts.multiplicities
    m_out = segment_sum(m, dest, plan.out_count)
    w = (m / m_out[dest]).unsqueeze(1)
    h = segment_sum(w * ts.tokens, dest, plan.out_count)
    x = segment_sum(w * ts.anchors, dest, plan.out_count)
    if mlp is not None:
        h = mlp(h)
    return TokenSet(h, x, m_out)


def level_sizes(n: int, layers: int) -> list[int]:
    sizes = []
    for _ in range(layers):
        n = math.ceil(n / 2)
        sizes.append(n)
    return sizes


class EncoderLayer(nn.Module):
    def __init__(self, dim, rope: RopeConfig, merge_hidden: int):
        super().__init__()
        self.attn = SelfAttention(dim, rope)
        self.merge_mlp = FeedForward(dim, merge_hidden)

    def forward(self, ts: TokenSet) -> TokenSet:
        ts = self.attn(ts)
        return merge(ts, plan_merge(ts.tokens), self.merge_mlp)


class Encoder(nn.Module):
    def __init__(self, dim: int, layers: int, rope: RopeConfig, merge_hidden: int):
        super().__init__()
        self.num_layers = layers
        for i in range(1, layers + 1):
            self.add_module(f"layer{i}", EncoderLayer(dim, rope, merge_hidden))

    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(1, self.num_layers + 1)]

    def forward(self, ts: TokenSet):
        """Returns the super tokens and the token count after each layer."""
        sizes = []
        for layer in self.layers():
            ts = layer(ts)
            sizes.append(len(ts))
        return ts, sizes
