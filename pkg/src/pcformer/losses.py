"""Rollout loss, SPH velocity-divergence regularizer and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .neighborhood import radius_pairs
from .state import Trajectory


@dataclass(frozen=True)
class LossWeights:
    phys: float = 0.0
    pos: float = 1.0
    vel: float = 1.0

    def __post_init__(self):
        if min(self.phys, self.pos, self.vel) < 0 or self.pos + self.vel <= 0:
            raise ValueError(f"invalid loss weights {self}")


def rollout_loss(pred_x, pred_v, gt_x, gt_v, weights: LossWeights = LossWeights()):
    """pos * MSE(X) + vel * MSE(V), averaged over steps, particles and axes."""
    pred_x, pred_v, gt_x, gt_v = (torch.as_tensor(np.asarray(a)) if not isinstance(a, torch.Tensor) else a
                                  for a in (pred_x, pred_v, gt_x, gt_v))
    if pred_x.shape != gt_x.shape or pred_v.shape != gt_v.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred_x.shape)}/{tuple(pred_v.shape)} "
                         f"vs gt {tuple(gt_x.shape)}/{tuple(gt_v.shape)}")
    gt_x = gt_x.to(pred_x.dtype)
    gt_v = gt_v.to(pred_v.dtype)
    return weights.pos * ((pred_x - gt_x) ** 2).mean() + weights.vel * ((pred_v - gt_v) ** 2).mean()


# cubic spline, support radius 2h, 3D normalization 1 / (pi h^3)
def cubic_spline(r, h):
    q = r / h
    sigma = 1.0 / (math.pi * h ** 3)
    inner = 1 - 1.5 * q ** 2 + 0.75 * q ** 3
    outer = 0.25 * (2 - q).clamp_min(0) ** 3
    return sigma * torch.where(q < 1, inner, outer)


def cubic_spline_derivative(r, h):
    q = r / h
    sigma = 1.0 / (math.pi * h ** 3)
    inner = -3 * q + 2.25 * q ** 2
    outer = -0.75 * (2 - q).clamp_min(0) ** 2
    return sigma / h * torch.where(q < 1, inner, outer)


def sph_divergence(x, v, masses, h: float):
    """Per-particle SPH estimate of div v.

    rho_i = sum_j m_j W(|x_ij|) (self included) and
    div_i = -(1 / rho_i) sum_{j != i} m_j (v_i - v_j) . grad_i W(x_ij).
    Neighbor pairs are a graph constant; gradients flow through x and v.
    """
    if not h > 0:
        raise ValueError("smoothing length must be positive")
    x = torch.as_tensor(x)
    v = torch.as_tensor(v, dtype=x.dtype)
    masses = torch.as_tensor(masses, dtype=x.dtype)
    n = x.shape[0]
    qi, tj, _ = radius_pairs(x.detach().cpu().numpy(), x.detach().cpu().numpy(), 2 * h, exclude_self=True)
    i = torch.as_tensor(qi, dtype=torch.long)
    j = torch.as_tensor(tj, dtype=torch.long)
    xij = x[i] - x[j]
    r = xij.norm(dim=1)
    rho = masses * cubic_spline(torch.zeros((), dtype=x.dtype), h)
    rho = rho.index_add(0, i, masses[j] * cubic_spline(r, h))
    if (rho <= 0).any():
        bad = int(torch.nonzero(rho <= 0)[0])
        raise ValueError(f"zero SPH density at particle {bad}")
    grad_w = cubic_spline_derivative(r, h).unsqueeze(1) * xij / r.clamp_min(1e-12).unsqueeze(1)
    term = masses[j] * ((v[i] - v[j]) * grad_w).sum(1)
    return -x.new_zeros(n).index_add(0, i, term) / rho


def divergence_loss(xs, vs, masses, h: float):
    """Mean squared divergence over a list of predicted frames."""
    return torch.stack([(sph_divergence(x, v, masses, h) ** 2).mean() for x, v in zip(xs, vs)]).mean()


def eval_metrics(pred: Trajectory, ref: Trajectory, seconds: float | None = None) -> dict:
    """Position / velocity MSE over aligned frames plus per-frame curves."""
    if pred.positions.shape != ref.positions.shape:
        raise ValueError(f"trajectories not aligned: {pred.positions.shape} vs {ref.positions.shape}")
    dx = pred.positions.astype(np.float64) - ref.positions.astype(np.float64)
    dv = pred.velocities.astype(np.float64) - ref.velocities.astype(np.float64)
    report = {
        "position_mse": float(np.mean(dx ** 2)),
        "velocity_mse": float(np.mean(dv ** 2)),
        "frames": pred.frame_count,
        "position_mse_per_frame": np.mean(dx ** 2, axis=(1, 2)).tolist(),
        "velocity_mse_per_frame": np.mean(dv ** 2, axis=(1, 2)).tolist(),
    }
    if seconds is not None and seconds > 0:
        report["frames_per_second"] = pred.frame_count / seconds
    return report


def write_report(report: dict, path=None) -> str:
    """Flat ``name = value`` text; list values are comma-joined."""
    lines = []
    for k, v in report.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(f"{x:.9g}" for x in v)
        elif isinstance(v, float):
            v = f"{v:.9g}"
        lines.append(f"{k} = {v}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
