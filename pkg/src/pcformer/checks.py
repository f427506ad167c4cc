"""Finite-difference gradient checks over representative computation graphs.

Each builder returns ``(loss_fn, params)`` in float64, ready for
:func:`pcformer.substrate.grad_check`.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn

from . import substrate as S
from .attention import CrossAttention, FeedForward, RopeConfig, SelfAttention, TokenSet
from .encoder import EncoderLayer, merge, plan_merge
from .model import Corrector, ModelConfig, build_neighbors, make_scene
from .simulator import rollout_tensors
from .state import BoundarySet, Topology
from .losses import LossWeights
from .toy_data import gen_spring_lattice, grid_edges
from .training import window_loss

DT = torch.float64


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _randn(*shape, g, scale=1.0):
    return (torch.randn(*shape, generator=g, dtype=DT) * scale)


def _leaf(t):
    return t.detach().clone().requires_grad_(True)


def op_graphs(seed=0):
    g = _gen(seed)
    graphs = {}
    a, b = _leaf(_randn(4, 5, g=g)), _leaf(_randn(5, 3, g=g))
    w = _randn(4, 3, g=g)
    graphs["matmul"] = (lambda: (S.matmul(a, b) * w).sum(), {"a": a, "b": b})
    x, y = _leaf(_randn(4, 3, g=g)), _leaf(_randn(4, 3, g=g))
    graphs["add_sub_mul_scale"] = (lambda: ((x + y) * (x - y) * 0.7 * w).sum() + (2.5 * x * y).sum(), {"x": x, "y": y})
    c1, c2 = _leaf(_randn(4, 2, g=g)), _leaf(_randn(4, 3, g=g))
    w5 = _randn(4, 5, g=g)
    graphs["concat"] = (lambda: (S.concat([c1, c2]) ** 2 * w5).sum(), {"a": c1, "b": c2})
    src = _leaf(_randn(6, 3, g=g))
    idx = torch.tensor([5, 0, 0, 3, 2])
    w53 = _randn(5, 3, g=g)
    graphs["row_gather"] = (lambda: (S.row_gather(src, idx) ** 2 * w53).sum(), {"x": src})
    ids = torch.tensor([0, 2, 2, 0, 3, 2])
    w43 = _randn(4, 3, g=g)
    graphs["segment_sum"] = (lambda: (S.segment_sum(src, ids, 4) ** 2 * w43).sum(), {"x": src})
    r = _leaf(_randn(5, 4, g=g))
    w54 = _randn(5, 4, g=g)
    graphs["relu"] = (lambda: (torch.relu(r) * w54).sum(), {"x": r})
    ln_x, gain, bias = _leaf(_randn(5, 4, g=g)), _leaf(1 + 0.1 * _randn(4, g=g)), _leaf(0.1 * _randn(4, g=g))
    graphs["layer_norm"] = (lambda: (S.layer_norm(ln_x, gain, bias) ** 2 * w54).sum(),
                            {"x": ln_x, "gain": gain, "bias": bias})
    sm = _leaf(_randn(5, 4, g=g))
    graphs["softmax"] = (lambda: (S.softmax(sm) * w54).sum(), {"x": sm})
    ca, cb = _leaf(_randn(3, 4, g=g)), _leaf(_randn(5, 4, g=g))
    w35 = _randn(3, 5, g=g)
    graphs["pairwise_cosine"] = (lambda: (S.pairwise_cosine(ca, cb) * w35).sum(), {"a": ca, "b": cb})
    lat = _leaf(_randn(3, 3, 3, 2, 4, g=g))
    disp = _randn(7, 3, g=g, scale=0.4)
    w724 = _randn(7, 2, 4, g=g)
    graphs["trilinear_lattice_lookup"] = (lambda: (S.trilinear_lattice_lookup(lat, disp, 1.0) * w724).sum(), {"lattice": lat})
    rx = _leaf(_randn(5, 8, g=g))
    ang = _randn(5, 4, g=g)
    w58 = _randn(5, 8, g=g)
    graphs["rotary_rotate"] = (lambda: (S.rotary_rotate(rx, ang) * w58).sum(), {"x": rx})
    return graphs


def mlp_graph(seed=0, widths=(5, 8, 8, 3)):
    g = _gen(seed)
    mlp = nn.Sequential()
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        mlp.append(nn.Linear(a, b))
        if i < len(widths) - 2:
            mlp.append(nn.Tanh())
    S.init_parameters(mlp, g)
    mlp.double()
    x = _randn(6, widths[0], g=g)
    target = _randn(6, widths[-1], g=g)
    return (lambda: ((mlp(x) - target) ** 2).mean()), dict(mlp.named_parameters())


def _small_cfg(**kw):
    base = dict(attr_dim=2, boundary_dim=3, width=16, width_s=4, width_t=4, width_b=4, width_self=4,
                radius=0.6, enc_layers=2, enc_heads=2, enc_rotary_dim=6, dec_layers=2, dec_heads=2,
                dec_rotary_dim=6, ffn_hidden=16, head_hidden=(8,), head_zero_init=False, init_seed=3,
                lattice_res=3)
    base.update(kw)
    return ModelConfig(**base)


def small_scene(n=8, seed=0, dtype=DT, spacing=0.3, attr_dim=2, boundary_dim=3):
    """N particles in a 2-wide sheet with rest topology and a few floor samples."""
    rng = np.random.default_rng(seed)
    nx, ny = 2, n // 2
    gx, gy = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    rest = np.stack([gx.ravel(), gy.ravel(), np.full(n, 0.7 * spacing)], 1)
    x = rest + rng.normal(0, 0.1 * spacing, rest.shape)
    v = rng.normal(0, 0.5, (n, 3))
    attrs = np.column_stack([rng.uniform(0.8, 1.2, n), rng.uniform(0.2, 0.4, (n, attr_dim - 1))])
    lo, hi = -spacing, (ny + 1) * spacing
    bpos = np.column_stack([rng.uniform(lo, 2 * spacing, 10), rng.uniform(lo, hi, 10), np.zeros(10)])
    if boundary_dim >= 3:
        boundary = BoundarySet.with_normals(bpos, np.tile([0.0, 0.0, 1.0], (10, 1)),
                                            rng.uniform(0, 1, (10, boundary_dim - 3)))
    else:
        boundary = BoundarySet(bpos, rng.uniform(0, 1, (10, boundary_dim)))
    topo = Topology(grid_edges(nx, ny))
    scene = make_scene(attrs, boundary, topo, rest, dtype)
    return scene, torch.as_tensor(x, dtype=dtype), torch.as_tensor(v, dtype=dtype)


def tokenizer_graph(seed=0):
    model = Corrector(_small_cfg()).double()
    scene, x, v = small_scene(seed=seed)
    g = _gen(seed)
    probe = _randn(8, 16, g=g)
    nb = build_neighbors(x.numpy(), scene, model.cfg)

    def loss():
        return (model.tokenizer(x, v, scene, nb, model.radii(scene)) * probe).sum()

    return loss, {k: p for k, p in model.tokenizer.named_parameters()}


def encoder_layer_graph(seed=0, m=8, d=16):
    g = _gen(seed)
    layer = EncoderLayer(d, RopeConfig(2, d // 2, 6, 0.5), d)
    S.init_parameters(layer, g)
    layer.double()
    tokens = _randn(m, d, g=g)
    anchors = _randn(m, 3, g=g, scale=0.5)
    ts = TokenSet.level0(tokens, anchors)
    plan = plan_merge(layer.attn(ts).tokens)
    probe_h = _randn((m + 1) // 2, d, g=g)
    probe_x = _randn((m + 1) // 2, 3, g=g)

    def loss():
        out = merge(layer.attn(ts), plan, layer.merge_mlp)
        return (out.tokens * probe_h).sum() + (out.anchors * probe_x).sum()

    return loss, dict(layer.named_parameters())


def attention_graphs(seed=0, m=6, d=16):
    g = _gen(seed)
    rope = RopeConfig(2, d // 2, 6, 0.5)
    sa, ca, ff = SelfAttention(d, rope), CrossAttention(d, rope), FeedForward(d, 24)
    for mod in (sa, ca, ff):
        S.init_parameters(mod, g)
        mod.double()
    q = TokenSet.level0(_randn(m, d, g=g), _randn(m, 3, g=g, scale=0.5))
    k = TokenSet.level0(_randn(3, d, g=g), _randn(3, 3, g=g, scale=0.5))
    probe = _randn(m, d, g=g)
    return {
        "self_attention": (lambda: (sa(q).tokens * probe).sum(), dict(sa.named_parameters())),
        "cross_attention": (lambda: (ca(q, k).tokens * probe).sum(), dict(ca.named_parameters())),
        "ffn": (lambda: (ff(q.tokens) * probe).sum(), dict(ff.named_parameters())),
    }


def corrector_graph(seed=0, n=8, cfg: ModelConfig | None = None):
    """Full corrector; with ``cfg`` the scene is scaled to its interaction radius."""
    if cfg is None:
        model = Corrector(_small_cfg()).double()
        scene, x, v = small_scene(n, seed)
    else:
        model = Corrector(dataclasses.replace(cfg, head_zero_init=False)).double()
        scene, x, v = small_scene(n, seed, spacing=0.5 * cfg.radius, attr_dim=cfg.attr_dim,
                                  boundary_dim=cfg.boundary_dim)
    g = _gen(seed + 1)
    px, pv = _randn(n, 3, g=g), _randn(n, 3, g=g)
    nb = build_neighbors(x.numpy(), scene, model.cfg)

    def loss():
        dx, dv = model(x, v, scene, nb)
        return (dx * px).sum() + (dv * pv).sum()

    return loss, dict(model.named_parameters()), model


def rollout_attribute_graph(seed=0, n=6, window=3, channel=1):
    """Gradient of a W-step rollout loss w.r.t. one attribute channel (shared by all particles)."""
    model = Corrector(_small_cfg(init_seed=5)).double()
    for p in model.parameters():
        p.requires_grad_(False)
    scene, x, v = small_scene(n, seed)
    base_attrs = scene.attributes.clone()
    mu = torch.tensor([0.3], dtype=DT, requires_grad=True)
    forces = (base_attrs[:, :1] * torch.tensor([0.0, 0.0, -9.81], dtype=DT)).expand(window - 1, n, 3)
    g = _gen(seed + 2)
    target = _randn(window - 1, n, 3, g=g, scale=0.1) + x

    def loss():
        onehot = torch.zeros(base_attrs.shape[1], dtype=DT)
        onehot[channel] = 1.0
        scene.attributes = base_attrs * (1 - onehot) + mu * onehot
        xs, vs = rollout_tensors(model, scene, x, v, forces, 0.02, window - 1)
        return ((torch.stack(xs) - target) ** 2).mean() + (torch.stack(vs) ** 2).mean()

    return loss, {"mu": mu}


def total_loss_graph(seed=0, window=3, lambda_phys=0.5, sph_h=0.06):
    """Full training loss (rollout MSE plus SPH divergence) of a W-step window on a 2 x 3 spring sheet."""
    traj = gen_spring_lattice(dims=(2, 3), frames=window + 1, seed=seed, jitter=1.0)
    model = Corrector(_small_cfg(init_seed=seed + 7, radius=0.12, topology_factor=1.5)).double()
    weights = LossWeights(phys=lambda_phys)

    def loss():
        return window_loss(model, traj, 1, window, weights, sph_h)

    return loss, dict(model.named_parameters())


def run_suite(modules=None, max_entries=6, tol=1e-4, rollout_tol=1e-3, model_cfg: ModelConfig | None = None):
    """Run the named gradient checks; returns {name: GradCheckReport}."""
    reports = {}

    def want(group):
        return modules is None or any(m.split(".")[0] == group for m in modules)

    if want("substrate"):
        for name, (f, params) in op_graphs().items():
            reports[f"substrate.{name}"] = (f, params, None, tol)
        f, params = mlp_graph()
        reports["substrate.mlp"] = (f, params, None, tol)
    if want("attention"):
        for name, (f, params) in attention_graphs().items():
            reports[f"attention.{name}"] = (f, params, max_entries, tol)
    if want("tokenizer"):
        f, params = tokenizer_graph()
        reports["tokenizer.branches"] = (f, params, max_entries, tol)
    if want("encoder"):
        f, params = encoder_layer_graph()
        reports["encoder.layer"] = (f, params, max_entries, tol)
    if want("corrector"):
        # the configured model when given, else a small fixed one
        f, params, _ = corrector_graph(cfg=model_cfg)
        reports["corrector.full"] = (f, params, max_entries, tol)
    if want("loss"):
        f, params = total_loss_graph()
        reports["loss.total"] = (f, params, max_entries, tol)
    if want("rollout"):
        f, params = rollout_attribute_graph()
        reports["rollout.attribute"] = (f, params, None, rollout_tol)
    selected = {k: v for k, v in reports.items()
                if modules is None or any(k == m or k.startswith(m + ".") for m in modules)}
    return {k: S.grad_check(f, params, tol=t, max_entries=me) for k, (f, params, me, t) in selected.items()}
