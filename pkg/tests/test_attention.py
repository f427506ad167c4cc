import math

import numpy as np
import pytest
import torch

from oracles import naive_attention
from pcformer import attention as A
from pcformer.attention import CrossAttention, FeedForward, RopeConfig, SelfAttention, TokenSet, rope3d_rotate
from pcformer.substrate import init_parameters

D = torch.float64


def _mods(d=24, heads=2, rot=6, seed=0):
    rope = RopeConfig(heads, d // heads, rot, 0.3)
    sa, ca = SelfAttention(d, rope), CrossAttention(d, rope)
    g = torch.Generator().manual_seed(seed)
    init_parameters(sa, g)
    init_parameters(ca, g)
    return sa.double(), ca.double(), rope


def _ts(m, d, seed, spread=1.0):
    g = torch.Generator().manual_seed(seed)
    return TokenSet.level0(torch.randn(m, d, dtype=D, generator=g), spread * torch.randn(m, 3, dtype=D, generator=g))


def test_rope_config_validation():
    with pytest.raises(ValueError):
        RopeConfig(2, 8, 4, 1.0)
    with pytest.raises(ValueError):
        RopeConfig(2, 4, 6, 1.0)


def test_rope_angles_layout():
    cfg = RopeConfig(1, 12, 12, 2.0, base=10000.0)
    ang = cfg.angles(torch.tensor([[1.0, 2.0, 3.0]], dtype=D))[0]
    for axis, coord in enumerate((1.0, 2.0, 3.0)):
        for f in range(2):
            assert ang[axis * 2 + f].item() == pytest.approx(coord / 2.0 * 10000.0 ** (-2 * f / 4))


def test_rope_logits_depend_only_on_relative_position(rng):
    cfg = RopeConfig(2, 12, 12, 0.5)
    q = torch.tensor(rng.normal(size=(5, 2, 12)))
    k = torch.tensor(rng.normal(size=(7, 2, 12)))
    aq, ak = torch.tensor(rng.normal(size=(5, 3))), torch.tensor(rng.normal(size=(7, 3)))
    s = torch.tensor([4.0, -1.5, 9.0], dtype=D)

    def logits(a1, a2):
        return torch.einsum("ihd,jhd->hij", rope3d_rotate(q, a1, cfg), rope3d_rotate(k, a2, cfg))

    torch.testing.assert_close(logits(aq + s, ak + s), logits(aq, ak), atol=1e-10, rtol=0)


def test_rope_leaves_non_rotary_channels():
    cfg = RopeConfig(1, 10, 6, 1.0)
    v = torch.randn(3, 1, 10, dtype=D)
    out = rope3d_rotate(v, torch.randn(3, 3, dtype=D), cfg)
    assert torch.equal(out[..., 6:], v[..., 6:])


def test_attention_rows_sum_to_one():
    sa, ca, _ = _mods()
    q = _ts(9, 24, 1)
    _, w = sa(q, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)
    _, w = ca(q, _ts(4, 24, 2), return_weights=True)
    assert w.shape == (2, 9, 4)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_duplicated_key_set_leaves_output_unchanged():
    _, ca, _ = _mods()
    q, k = _ts(5, 24, 3), _ts(4, 24, 4)
    k2 = TokenSet(torch.cat([k.tokens, k.tokens]), torch.cat([k.anchors, k.anchors]), torch.ones(8, dtype=D))
    torch.testing.assert_close(ca(q, k2).tokens, ca(q, k).tokens)


def test_cross_attention_matches_naive_loops():
    _, ca, rope = _mods(d=12, heads=1, rot=6)
    q, k = _ts(4, 12, 5), _ts(6, 12, 6)
    out = ca(q, k).tokens
    with torch.no_grad():
        ln = lambda x, m: torch.nn.functional.layer_norm(x, (12,), m.weight, m.bias, 1e-5)
        xq, xk = ln(q.tokens, ca.norm_q), ln(k.tokens, ca.norm_kv)
        qq = rope3d_rotate(ca.wq(xq).view(-1, 1, 12), q.anchors, rope)[:, 0]
        kk = rope3d_rotate(ca.wk(xk).view(-1, 1, 12), k.anchors, rope)[:, 0]
        vv = ca.wv(xk)
        ref = q.tokens + ca.wo(torch.tensor(naive_attention(qq.numpy(), kk.numpy(), vv.numpy())))
    torch.testing.assert_close(out, ref.detach())


def test_query_chunking_does_not_change_results(monkeypatch):
    sa, _, _ = _mods()
    ts = _ts(37, 24, 7)
    full = sa(ts).tokens
    monkeypatch.setattr(A, "QUERY_CHUNK", 8)
    torch.testing.assert_close(sa(ts).tokens, full, atol=1e-12, rtol=0)


def test_self_attention_translation_invariant():
    sa, _, _ = _mods()
    ts = _ts(10, 24, 8)
    moved = TokenSet.level0(ts.tokens, ts.anchors + torch.tensor([10.0, -3.0, 2.0], dtype=D))
    torch.testing.assert_close(sa(moved).tokens, sa(ts).tokens, atol=1e-9, rtol=0)


def test_self_attention_permutation_equivariant():
    sa, _, _ = _mods()
    ts = _ts(10, 24, 9)
    p = torch.randperm(10, generator=torch.Generator().manual_seed(0))
    tp = TokenSet.level0(ts.tokens[p], ts.anchors[p])
    torch.testing.assert_close(sa(tp).tokens, sa(ts).tokens[p], atol=1e-12, rtol=0)


def test_cross_attention_empty_keys():
    _, ca, _ = _mods()
    empty = TokenSet(torch.zeros(0, 24, dtype=D), torch.zeros(0, 3, dtype=D), torch.zeros(0, dtype=D))
    with pytest.raises(ValueError):
        ca(_ts(3, 24, 0), empty)


def test_feedforward_residual():
    ff = FeedForward(8, 16).double()
    torch.nn.init.zeros_(ff.w2.weight)
    torch.nn.init.zeros_(ff.w2.bias)
    x = torch.randn(5, 8, dtype=D)
    assert torch.equal(ff(x), x)


def test_tokenset_shape_checks():
    with pytest.raises(ValueError):
        TokenSet(torch.zeros(3, 4), torch.zeros(2, 3), torch.ones(3))
