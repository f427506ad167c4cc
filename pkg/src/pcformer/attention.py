"""Multi-head attention over point-anchored tokens with 3D rotary embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .substrate import layer_norm, rotary_rotate, softmax

# queries per block when forming attention logits; bounds peak memory at large M
QUERY_CHUNK = 1024


@dataclass
class TokenSet:
    tokens: torch.Tensor  # (M, d)
    anchors: torch.Tensor  # (M, 3)
    multiplicities: torch.Tensor  # (M,)

    def __post_init__(self):
        m = self.tokens.shape[0]
        if self.anchors.shape != (m, 3) or self.multiplicities.shape != (m,):
            raise ValueError(f"TokenSet shapes disagree: tokens {tuple(self.tokens.shape)}, "
                             f"anchors {tuple(self.anchors.shape)}, multiplicities {tuple(self.multiplicities.shape)}")

    def __len__(self):
        return self.tokens.shape[0]

    def with_tokens(self, tokens) -> "TokenSet":
        return TokenSet(tokens, self.anchors, self.multiplicities)

    @classmethod
    def level0(cls, tokens, anchors) -> "TokenSet":
        return cls(tokens, anchors, torch.ones(tokens.shape[0], dtype=tokens.dtype, device=tokens.device))


@dataclass(frozen=True)
class RopeConfig:
    heads: int
    head_dim: int
    rotary_dim: int
    scale: float
    base: float = 10000.0

    def __post_init__(self):
        if self.rotary_dim % 6 or self.rotary_dim > self.head_dim or self.rotary_dim < 0:
            raise ValueError(f"rotary dim {self.rotary_dim} must be a multiple of 6 and <= head dim {self.head_dim}")
        if not self.scale > 0:
            raise ValueError("rotary spatial scale must be positive")

    def angles(self, anchors):
        """(M, rotary_dim/2) phases, x-axis pairs first, then y, then z."""
        per_axis = self.rotary_dim // 6
        f = torch.arange(per_axis, dtype=anchors.dtype, device=anchors.device)
        inv = self.base ** (-2.0 * f / (self.rotary_dim // 3))
        return ((anchors / self.scale).unsqueeze(-1) * inv).reshape(anchors.shape[0], 3 * per_axis)


def rope3d_rotate(vectors, anchors, cfg: RopeConfig):
    """Rotate the first ``rotary_dim`` channels of each head by anchor-dependent phases.

    vectors: (M, H, head_dim); anchors: (M, 3).
    """
    if vectors.shape[1:] != (cfg.heads, cfg.head_dim):
        raise ValueError(f"expected (M, {cfg.heads}, {cfg.head_dim}), got {tuple(vectors.shape)}")
    if cfg.rotary_dim == 0:
        return vectors
    ang = cfg.angles(anchors).unsqueeze(1)
    rot = rotary_rotate(vectors[..., :cfg.rotary_dim], ang.expand(-1, cfg.heads, -1))
    return torch.cat([rot, vectors[..., cfg.rotary_dim:]], dim=-1)


def _attend(q, k, v, return_weights=False):
    # q: (Mq, H, dh), k/v: (Mk, H, dh)
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = k.permute(1, 2, 0)
    vh = v.transpose(0, 1)
    outs, weights = [], []
    for s in range(0, q.shape[0], QUERY_CHUNK):
        qh = q[s:s + QUERY_CHUNK].transpose(0, 1)
        w = softmax((qh @ kt) * scale)
        outs.append((w @ vh).transpose(0, 1))
        if return_weights:
            weights.append(w)
    out = torch.cat(outs, 0).reshape(q.shape[0], -1)
    return (out, torch.cat(weights, 1)) if return_weights else (out, None)


class _Attention(nn.Module):
    def __init__(self, dim: int, rope: RopeConfig):
        super().__init__()
        if dim != rope.heads * rope.head_dim:
            raise ValueError(f"width {dim} != heads {rope.heads} x head dim {rope.head_dim}")
        self.rope = rope
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def _mha(self, xq, aq, xkv, akv, return_weights):
        h, dh = self.rope.heads, self.rope.head_dim
        q = rope3d_rotate(self.wq(xq).view(-1, h, dh), aq, self.rope)
        k = rope3d_rotate(self.wk(xkv).view(-1, h, dh), akv, self.rope)
        v = self.wv(xkv).view(-1, h, dh)
        out, w = _attend(q, k, v, return_weights)
        return self.wo(out), w


class SelfAttention(_Attention):
    """Pre-norm residual self-attention: x + O(MHA(LN x)) at the tokens' own anchors."""

    def __init__(self, dim, rope):
        super().__init__(dim, rope)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ts: TokenSet, return_weights=False):
        x = layer_norm(ts.tokens, self.norm.weight, self.norm.bias)
        y, w = self._mha(x, ts.anchors, x, ts.anchors, return_weights)
        out = ts.with_tokens(ts.tokens + y)
        return (out, w) if return_weights else out


class CrossAttention(_Attention):
    """Queries attend to a separate key/value token set (e.g. particles -> super tokens)."""

    def __init__(self, dim, rope):
        super().__init__(dim, rope)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)

    def forward(self, queries: TokenSet, keys: TokenSet, return_weights=False):
        if len(keys) == 0:
            raise ValueError("cross-attention needs at least one key token")
        xq = layer_norm(queries.tokens, self.norm_q.weight, self.norm_q.bias)
        xkv = layer_norm(keys.tokens, self.norm_kv.weight, self.norm_kv.bias)
        y, w = self._mha(xq, queries.anchors, xkv, keys.anchors, return_weights)
        out = queries.with_tokens(queries.tokens + y)
        return (out, w) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.w1 = nn.Linear(dim, hidden)
        self.w2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return x + self.w2(torch.relu(self.w1(layer_norm(x, self.norm.weight, self.norm.bias))))
