"""Differentiable building blocks on top of torch autograd.

Torch supplies the reverse-mode engine; this module pins down the handful of
operations the model is written in (segment sums, lattice lookups, rotary
rotations, ...) with explicit shape checks, a path-addressed parameter store
with its own checkpoint format, and a central-difference gradient checker that
does not share any code with autograd.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"WPCKPT1"
LN_EPS = 1e-5


class OpError(ValueError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


def _shapes(*ts):
    return ", ".join(str(tuple(t.shape)) for t in ts)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise OpError("matmul", f"incompatible shapes {_shapes(a, b)}")
    return a @ b


def concat(tensors):
    lead = {tuple(t.shape[:-1]) for t in tensors}
    if len(lead) > 1:
        raise OpError("concat", f"leading dims differ: {_shapes(*tensors)}")
    return torch.cat(list(tensors), dim=-1)


def row_gather(x, idx):
    idx = torch.as_tensor(idx, dtype=torch.long, device=x.device)
    if len(idx) and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise OpError("row_gather", f"index out of range for {tuple(x.shape)}")
    return x.index_select(0, idx)


def segment_sum(x, ids, num_segments: int):
    """Sum rows of ``x`` into ``num_segments`` groups; empty groups give zero rows."""
    ids = torch.as_tensor(ids, dtype=torch.long, device=x.device)
    if ids.shape[0] != x.shape[0]:
        raise OpError("segment_sum", f"{ids.shape[0]} ids for {x.shape[0]} rows")
    out = x.new_zeros((num_segments,) + tuple(x.shape[1:]))
    if ids.numel() == 0:
        return out
    return out.index_add(0, ids, x)


def layer_norm(x, gain, bias, eps: float = LN_EPS):
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise OpError("layer_norm", f"gain/bias {_shapes(gain, bias)} for input {tuple(x.shape)}")
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def softmax(x):
    return torch.softmax(x, dim=-1)


def pairwise_cosine(a, b):
    """(M, K) cosine similarity between rows of ``a`` and ``b``."""
    if a.shape[-1] != b.shape[-1]:
        raise OpError("pairwise_cosine", f"widths differ: {_shapes(a, b)}")
    an = a / a.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    bn = b / b.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return an @ bn.T


def rotary_rotate(x, angles):
    """Rotate consecutive pairs ``(x[2p], x[2p+1])`` of ``x`` by ``angles[p]``."""
    if x.shape[-1] != 2 * angles.shape[-1]:
        raise OpError("rotary_rotate", f"{tuple(x.shape)} needs {x.shape[-1] // 2} angles, got {tuple(angles.shape)}")
    cos, sin = torch.cos(angles), torch.sin(angles)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)


def lattice_corners(r, radius: float, res: int):
    """Flat corner indices (E, 8) and trilinear weights (E, 8) for displacements ``r``.

    Weights are zero outside the support ball. Cell indices are clamped to
    [0, res-2] and fractional offsets to [0, 1] so that normalized coordinates
    of exactly +-1 stay inside the lattice.
    """
    if res < 2:
        raise OpError("trilinear_lattice_lookup", f"lattice resolution must be >= 2, got {res}")
    if r.ndim != 2 or r.shape[1] != 3:
        raise OpError("trilinear_lattice_lookup", f"displacements must be (E, 3), got {tuple(r.shape)}")
    xi = (r / radius + 1.0) * (0.5 * (res - 1))
    n = torch.floor(xi.detach()).clamp(0, res - 2)
    t = (xi - n).clamp(0.0, 1.0)
    n = n.long()
    inside = (r.detach() * r.detach()).sum(-1) <= radius * radius
    idx, wts = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = ((n[:, 0] + dx) * res + (n[:, 1] + dy)) * res + (n[:, 2] + dz)
                w = ((t[:, 0] if dx else 1 - t[:, 0])
                     * (t[:, 1] if dy else 1 - t[:, 1])
                     * (t[:, 2] if dz else 1 - t[:, 2]))
                idx.append(corner)
                wts.append(w)
    idx = torch.stack(idx, 1)
    wts = torch.stack(wts, 1) * inside.unsqueeze(1).to(r.dtype)
    return idx, wts


def trilinear_lattice_lookup(lattice, r, radius: float):
    """Interpolated lattice matrices W(r), shape (E, C_in, C_out)."""
    g = lattice.shape[0]
    idx, wts = lattice_corners(r, radius, g)
    flat = lattice.reshape(g ** 3, *lattice.shape[3:])
    return torch.einsum("ec,ecio->eio", wts, flat[idx])


def lattice_aggregate(lattice, r, feats, query_ids, num_queries: int, radius: float):
    """sum_j W(r_ij)^T u_ij per query, without materializing per-pair matrices.

    Pairs are first scattered into per-query lattice-vertex accumulators
    (N, G^3 * C_in), then contracted with the lattice in one matmul.
    """
    g, cin, cout = lattice.shape[0], lattice.shape[3], lattice.shape[4]
    if feats.shape[-1] != cin:
        raise OpError("lattice_aggregate", f"feature width {feats.shape[-1]} != kernel input width {cin}")
    out = feats.new_zeros((num_queries, cout))
    if feats.shape[0] == 0 or cin == 0:
        return out + 0.0 * lattice.sum()
    idx, wts = lattice_corners(r, radius, g)
    q = torch.as_tensor(query_ids, dtype=torch.long, device=feats.device)
    rows = (q.unsqueeze(1) * g ** 3 + idx).reshape(-1)
    vals = (wts.unsqueeze(2) * feats.unsqueeze(1)).reshape(-1, cin)
    acc = feats.new_zeros((num_queries * g ** 3, cin)).index_add(0, rows, vals)
    return acc.reshape(num_queries, g ** 3 * cin) @ lattice.reshape(g ** 3 * cin, cout)


def check_finite(name: str, x) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"{name}: non-finite values")


# -- parameters -------------------------------------------------------------

class ParamStore:
    """Path-addressed view of a module's parameters in lexicographic order."""

    def __init__(self, module: nn.Module):
        self.module = module
        self._params = dict(sorted(module.named_parameters()))

    def paths(self) -> list[str]:
        return list(self._params)

    def __getitem__(self, path):
        return self._params[path]

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self._params.items()}

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: p.detach().clone() for k, p in self._params.items()}

    def load(self, values: dict[str, torch.Tensor]):
        missing = set(self._params) ^ set(values)
        if missing:
            raise KeyError(f"parameter paths differ: {sorted(missing)}")
        with torch.no_grad():
            for k, p in self._params.items():
                if values[k].shape != p.shape:
                    raise OpError("load", f"{k}: shape {tuple(values[k].shape)} != {tuple(p.shape)}")
                p.copy_(values[k])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            for k, p in self._params.items():
                name = k.encode()
                fh.write(struct.pack("<I", len(name)) + name)
                fh.write(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
                fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())

    def load_file(self, path):
        self.load({k: torch.from_numpy(v) for k, v in read_checkpoint(path).items()})


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off, out = len(CKPT_MAGIC), {}
    try:
        while off < len(data):
            (ln,) = struct.unpack_from("<I", data, off)
            name = data[off + 4:off + 4 + ln].decode()
            off += 4 + ln
            (rank,) = struct.unpack_from("<I", data, off)
            dims = struct.unpack_from(f"<{rank}I", data, off + 4)
            off += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 4 * count > len(data):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(data, "<f4", count, off).reshape(dims).astype(np.float32)
            off += 4 * count
    except struct.error as err:
        raise ValueError(f"{path}: truncated checkpoint record") from err
    return out


def init_linear(layer: nn.Linear, generator: torch.Generator):
    bound = 1.0 / math.sqrt(layer.in_features) if layer.in_features else 0.0
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


def init_parameters(module: nn.Module, generator: torch.Generator, lattice_scale: float = 1e-2):
    """Deterministic initialization in module registration order."""
    for name, sub in module.named_modules():
        if isinstance(sub, nn.Linear):
            init_linear(sub, generator)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)
    for name, p in module.named_parameters():
        if ".lattice." in f".{name}":
            with torch.no_grad():
                p.uniform_(-lattice_scale, lattice_scale, generator=generator)


# -- finite differences -----------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e < self.tol else 'FAIL'} {k}: rel.err {e:.3e}" for k, e in self.errors.items()]


def _central_differences(f, flat, entries, h):
    fd = np.empty(len(entries))
    for n, e in enumerate(entries):
        orig = flat[e].item()
        flat[e] = orig + h
        fp = f().item()
        flat[e] = orig - h
        fm = f().item()
        flat[e] = orig
        fd[n] = (fp - fm) / (2 * h)
    return fd


def grad_check(f, params: dict[str, torch.Tensor], h: float = 1e-4, tol: float = 1e-4,
               max_entries: int | None = None, seed: int = 0, floor: float = 1e-7,
               fallback_steps=(1e-5, 1e-6)) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    The error of each parameter is ``max |fd - ad|`` over the checked entries,
    divided by the largest magnitude among those entries (at least ``floor``).
    With ``max_entries`` set, a seeded random subset of each tensor is probed.
    A tensor that fails at step ``h`` is re-probed at each of ``fallback_steps``
    and keeps its smallest error: piecewise-linear graphs (ReLU, greedy merging)
    can put a kink inside the stencil, while a wrong gradient fails at every step.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    if loss.numel() != 1:
        raise OpError("grad_check", f"loss must be scalar, got {tuple(loss.shape)}")
    loss.backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with torch.no_grad():
        for k, p in params.items():
            flat = p.view(-1)
            entries = np.arange(flat.numel())
            if max_entries is not None and len(entries) > max_entries:
                entries = np.sort(rng.choice(entries, max_entries, replace=False))
            ad = analytic[k].reshape(-1)[torch.as_tensor(entries, dtype=torch.long)].double().numpy()
            err = float("inf")
            for step in (h, *fallback_steps):
                fd = _central_differences(f, flat, entries, step)
                scale = max(np.abs(fd).max(initial=0.0), np.abs(ad).max(initial=0.0), floor)
                err = min(err, float(np.abs(fd - ad).max(initial=0.0) / scale))
                if err <= tol:
                    break
            report.errors[k] = err
    return report


def backward(loss):
    """Reverse-mode pass from a scalar loss; gradients accumulate across calls."""
    if loss.numel() != 1:
        raise OpError("backward", f"loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
