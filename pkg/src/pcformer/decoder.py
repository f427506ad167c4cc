"""Super-token decoder and the particle-wise prediction head."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .attention import CrossAttention, FeedForward, RopeConfig, SelfAttention, TokenSet
from .counts import PAPER_HEAD_WIDTHS, head_param_count  # noqa: F401  (re-exported)


class DecoderLayer(nn.Module):
    def __init__(self, dim, rope: RopeConfig, ffn_hidden: int):
        super().__init__()
        self.cross = CrossAttention(dim, rope)
        self.self_attn = SelfAttention(dim, rope)
        self.ffn = FeedForward(dim, ffn_hidden)

    def forward(self, x: TokenSet, supertokens: TokenSet) -> TokenSet:
        x = self.cross(x, supertokens)
        x = self.self_attn(x)
        return x.with_tokens(self.ffn(x.tokens))


class Decoder(nn.Module):
    def __init__(self, dim: int, layers: int, rope: RopeConfig, ffn_hidden: int):
        super().__init__()
        self.num_layers = layers
        for i in range(1, layers + 1):
            self.add_module(f"layer{i}", DecoderLayer(dim, rope, ffn_hidden))

    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(1, self.num_layers + 1)]

    def forward(self, particles: TokenSet, supertokens: TokenSet) -> TokenSet:
        for layer in self.layers():
            particles = layer(particles, supertokens)
        return particles


class PredictionHead(nn.Module):
    """Hidden layers are Linear -> ReLU -> LayerNorm; the last layer is plain linear."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("head needs at least input and output widths")
        mods = []
        for a, b in zip(widths[:-2], widths[1:-1]):
            mods += [nn.Linear(a, b), nn.ReLU(), nn.LayerNorm(b)]
        mods.append(nn.Linear(widths[-2], widths[-1]))
        self.net = nn.Sequential(*mods)

    @property
    def final(self) -> nn.Linear:
        return self.net[-1]

    def forward(self, tokens):
        out = self.net(tokens)
        return out[:, :3], out[:, 3:6]


def linear_count(a, b):
    return a * b + b


def attention_count(d, cross=False):
    return 4 * linear_count(d, d) + (4 if cross else 2) * d


def ffn_count(d, hidden):
    return 2 * d + linear_count(d, hidden) + linear_count(hidden, d)
