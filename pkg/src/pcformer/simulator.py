"""Prediction-correction timestep and autoregressive rollout."""
from __future__ import annotations

import numpy as np
import torch

from .model import Corrector, scene_from_system
from .state import BoundarySet, ParticleSystem, StateError, Topology, Trajectory, mass_matrix_inverse_apply, zero_fill_absent
from .tokenizer import SceneTensors


class RolloutDivergence(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at rollout step {step}")
        self.step = step


def predict(system: ParticleSystem, dt: float):
    """Explicit step under the known forces: V~ = V + dt M^-1 F, X~ = X + dt/2 (V + V~)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    acc = mass_matrix_inverse_apply(system, system.forces)
    v_pred = system.velocities + dt * acc
    x_pred = system.positions + (dt / 2) * (system.velocities + v_pred)
    return x_pred, v_pred


def predict_tensors(x, v, f, masses, dt: float):
    v_pred = v + dt * f / masses.unsqueeze(1)
    return x + (dt / 2) * (v + v_pred), v_pred


def correct(x_pred, v_pred, system: ParticleSystem, topology: Topology | None, boundary: BoundarySet | None,
            model: Corrector):
    """Residual (dX, dV) for a predicted state; neighborhoods are built from x_pred."""
    system, topology, boundary = zero_fill_absent(system, topology, boundary)
    dtype = next(model.parameters()).dtype
    scene = scene_from_system(system, boundary, topology, dtype, model.cfg.topology_factor)
    with torch.no_grad():
        dx, dv = model(torch.as_tensor(np.asarray(x_pred), dtype=dtype), torch.as_tensor(np.asarray(v_pred), dtype=dtype), scene)
    return dx.numpy(), dv.numpy()


def rollout_tensors(model: Corrector | None, scene: SceneTensors, x, v, forces, dt: float, steps: int,
                    check=True):
    """Differentiable rollout; returns lists of ``steps`` predicted positions and velocities.

    ``forces`` is indexable per step (sequence of (N, 3) tensors). With
    ``model=None`` the corrector is skipped (predictor-only baseline).
    """
    masses = scene.attributes[:, 0]
    xs, vs = [], []
    for n in range(steps):
        x_pred, v_pred = predict_tensors(x, v, forces[n], masses, dt)
        if model is not None:
            dx, dv = model(x_pred, v_pred, scene)
            x, v = x_pred + dx, v_pred + dv
        else:
            x, v = x_pred, v_pred
        if check:
            if not torch.isfinite(x).all():
                raise RolloutDivergence(n, "positions")
            if not torch.isfinite(v).all():
                raise RolloutDivergence(n, "velocities")
        xs.append(x)
        vs.append(v)
    return xs, vs


def rollout(initial: ParticleSystem, forces, topology: Topology | None, boundary: BoundarySet | None,
            dt: float, window: int, model: Corrector | None) -> Trajectory:
    """Roll ``window - 1`` prediction-correction steps from ``initial``.

    ``forces`` holds one (N, 3) array per step. The returned trajectory holds
    the ``window - 1`` predicted frames; frame k carries the force applied at
    step k.
    """
    if window < 2:
        raise ValueError("rollout window must be >= 2")
    forces = np.asarray(forces, dtype=np.float64)
    if forces.shape != (window - 1, initial.count, 3):
        raise StateError("forces", f"expected {(window - 1, initial.count, 3)}, got {forces.shape}")
    if not np.all(np.isfinite(forces)):
        raise StateError("forces", "non-finite force")
    initial, topology, boundary = zero_fill_absent(initial, topology, boundary)
    dtype = next(model.parameters()).dtype if model is not None else torch.float32
    factor = model.cfg.topology_factor if model is not None else 1.5
    scene = scene_from_system(initial, boundary, topology, dtype, factor)
    x = torch.as_tensor(initial.positions, dtype=dtype)
    v = torch.as_tensor(initial.velocities, dtype=dtype)
    f = torch.as_tensor(forces, dtype=dtype)
    with torch.no_grad():
        xs, vs = rollout_tensors(model, scene, x, v, f, dt, window - 1)
    return Trajectory(dt, torch.stack(xs).numpy(), torch.stack(vs).numpy(), forces,
                      initial.attributes, boundary, topology, initial.rest_positions)
