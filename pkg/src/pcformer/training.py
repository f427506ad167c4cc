"""Optimizer, learning-rate schedule, windowed rollout training and inverse design."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .losses import LossWeights, divergence_loss, rollout_loss
from .model import Corrector, scene_from_trajectory
from .simulator import rollout_tensors
from .state import Trajectory
from .substrate import ParamStore

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    window: int = 4
    lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 10000
    min_lr: float = 5e-6
    warmup_start: float = 0.01
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    epochs: int = 10
    lambda_phys: float = 0.0
    pos_weight: float = 1.0
    vel_weight: float = 1.0
    sph_h: float = 0.05
    val_windows: int = 4

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("training window must be >= 2")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_phys, self.pos_weight, self.vel_weight)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_start * lr`` to ``lr``, cosine decay to ``min_lr``."""
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.lr * (cfg.warmup_start + (1 - cfg.warmup_start) * frac)
    span = cfg.total_steps - cfg.warmup_steps
    if step >= cfg.total_steps or span <= 0:
        return cfg.min_lr if step >= cfg.total_steps else cfg.lr
    progress = (step - cfg.warmup_steps) / span
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


def attribute_stats(dataset: list[Trajectory], floor: float = 1e-6) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std of particle attributes over a dataset.

    Channels that are (nearly) constant get scale 1 so they are only shifted.
    """
    c = np.concatenate([np.asarray(t.attributes, np.float64) for t in dataset])
    mean, std = c.mean(0), c.std(0)
    std = np.where(std < floor, 1.0, std)
    return tuple(float(a) for a in mean), tuple(float(a) for a in std)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        for g in grads:
            g.mul_(max_norm / total)
    return total


@torch.no_grad()
def optimizer_step(params, grads, state: AdamState, cfg: TrainConfig, lr: float) -> AdamState:
    """One AdamW update with bias correction and decoupled weight decay (in place)."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.mul_(1 - lr * cfg.weight_decay)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps))
    return state


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def window_loss(model, traj: Trajectory, start: int, window: int, weights: LossWeights, sph_h: float,
                scene=None):
    """Eq.-style rollout loss of ``window - 1`` steps from the ground-truth state at ``start``."""
    dtype = next(model.parameters()).dtype if model is not None else torch.float32
    scene = scene if scene is not None else scene_from_trajectory(traj, dtype)
    sl = slice(start, start + window)
    gx = torch.as_tensor(traj.positions[sl], dtype=dtype)
    gv = torch.as_tensor(traj.velocities[sl], dtype=dtype)
    gf = torch.as_tensor(traj.forces[sl], dtype=dtype)
    xs, vs = rollout_tensors(model, scene, gx[0], gv[0], gf, traj.dt, window - 1)
    px, pv = torch.stack(xs), torch.stack(vs)
    loss = rollout_loss(px, pv, gx[1:], gv[1:], weights)
    if weights.phys > 0:
        loss = loss + weights.phys * divergence_loss(xs, vs, scene.attributes[:, 0], sph_h)
    return loss


def validation_loss(model, dataset, cfg: TrainConfig, scenes=None, workers: int = 1) -> float:
    """Mean window loss over evenly spaced windows of every validation trajectory.

    Windows are independent, so ``workers`` threads may evaluate them; the
    partial losses are summed in a fixed order, so the result does not depend
    on the worker count.
    """
    if not dataset:
        return float("nan")
    jobs = []
    for k, traj in enumerate(dataset):
        last = traj.frame_count - cfg.window
        starts = np.unique(np.linspace(0, last, cfg.val_windows).round().astype(int))
        jobs += [(k, int(s)) for s in starts]

    def one(job):
        k, s = job
        with torch.no_grad():
            return window_loss(model, dataset[k], s, cfg.window, cfg.loss_weights, cfg.sph_h,
                               scenes[k] if scenes else None).item()

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            losses = list(pool.map(one, jobs))
    else:
        losses = [one(j) for j in jobs]
    return math.fsum(losses) / len(losses)


@dataclass
class TrainResult:
    best_state: dict
    best_step: int
    best_val: float
    curve: list = field(default_factory=list)  # (step, train_loss, val_loss, lr)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "val_loss", "lr"])
            for row in self.curve:
                w.writerow([row[0], f"{row[1]:.9g}", f"{row[2]:.9g}", f"{row[3]:.9g}"])


def train(model: Corrector, dataset: list[Trajectory], cfg: TrainConfig, val_set: list[Trajectory] | None = None,
          progress=None, workers: int = 1) -> TrainResult:
    """Batch-size-1 training on random windows; keeps the best-validation parameters.

    The model is left holding the selected (best) parameters on return.
    ``workers`` only parallelizes validation and never changes the result.
    """
    for traj in dataset:
        if traj.frame_count < cfg.window:
            raise ValueError(f"trajectory with {traj.frame_count} frames is shorter than window {cfg.window}")
    store = ParamStore(model)
    params = [p for _, p in store]
    dtype = params[0].dtype
    scenes = [scene_from_trajectory(t, dtype, model.cfg.topology_factor) for t in dataset]
    val_scenes = [scene_from_trajectory(t, dtype, model.cfg.topology_factor) for t in (val_set or [])]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    result = TrainResult(store.snapshot(), 0, float("inf"))
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for k in rng.permutation(len(dataset)):
            traj = dataset[k]
            start = int(rng.integers(0, traj.frame_count - cfg.window + 1))
            store.zero_grad()
            loss = window_loss(model, traj, start, cfg.window, cfg.loss_weights, cfg.sph_h, scenes[k])
            if not torch.isfinite(loss):
                raise TrainingDivergence(step, f"non-finite loss on sample {k}")
            loss.backward()
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            clip_grad_norm(grads, cfg.clip_norm)
            lr = lr_at(step, cfg)
            optimizer_step(params, grads, state, cfg, lr)
            epoch_loss += loss.item()
            result.curve.append((step, loss.item(), float("nan"), lr))
            step += 1
        val = validation_loss(model, val_set, cfg, val_scenes, workers) if val_set else epoch_loss / max(len(dataset), 1)
        step_, tr, _, lr_ = result.curve[-1]
        result.curve[-1] = (step_, tr, val, lr_)
        if val < result.best_val:
            result.best_val, result.best_step, result.best_state = val, step, store.snapshot()
        log.info("epoch %d step %d train %.4e val %.4e", epoch, step, epoch_loss / max(len(dataset), 1), val)
        if progress is not None:
            progress(epoch, step, epoch_loss / max(len(dataset), 1), val)
    store.load(result.best_state)
    return result


# -- inverse design ---------------------------------------------------------

@dataclass
class InverseResult:
    mu: float
    losses: list
    mus: list

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "mu"])
            for i, (e, m) in enumerate(zip(self.losses, self.mus)):
                w.writerow([i, f"{e:.9g}", f"{m:.9g}"])


def optimize_bounded(objective, mu0: float, lo: float, hi: float, lr: float, iters: int) -> InverseResult:
    """Gradient descent on a scalar kept in (lo, hi) through a sigmoid reparametrization."""
    if not lo < mu0 < hi:
        raise ValueError(f"mu0={mu0} must lie strictly inside ({lo}, {hi})")
    p = (mu0 - lo) / (hi - lo)
    u = torch.tensor(math.log(p / (1 - p)), dtype=torch.float64, requires_grad=True)
    losses, mus = [], []
    for _ in range(iters):
        mu = lo + (hi - lo) * torch.sigmoid(u)
        e = objective(mu)
        (g,) = torch.autograd.grad(e, u)
        losses.append(e.item())
        mus.append(mu.item())
        with torch.no_grad():
            u -= lr * g
    final = float(lo + (hi - lo) * torch.sigmoid(u.detach()))
    return InverseResult(final, losses, mus)


def terminal_position(model, template: Trajectory, mu, channel: int, steps: int, body_z_max: float):
    """Mean terminal x of body particles (terminal z <= body_z_max) with attribute ``channel`` set to mu."""
    dtype = next(model.parameters()).dtype
    scene = scene_from_trajectory(template, dtype, model.cfg.topology_factor)
    mu = mu.to(dtype) if torch.is_tensor(mu) else torch.tensor(float(mu), dtype=dtype)
    attrs = scene.attributes.clone()
    onehot = torch.zeros(attrs.shape[1], dtype=dtype)
    onehot[channel] = 1.0
    scene.attributes = attrs * (1 - onehot) + mu * onehot
    x0 = torch.as_tensor(template.positions[0], dtype=dtype)
    v0 = torch.as_tensor(template.velocities[0], dtype=dtype)
    forces = torch.as_tensor(template.forces[:steps], dtype=dtype)
    xs, _ = rollout_tensors(model, scene, x0, v0, forces, template.dt, steps)
    xt = xs[-1]
    body = xt[:, 2].detach() <= body_z_max
    if not bool(body.any()):
        raise ValueError("no body particles satisfy the height predicate")
    return xt[body, 0].mean()


def inverse_design(model: Corrector, template: Trajectory, target_x: float, mu0: float, iters: int,
                   channel: int = 1, steps: int | None = None, lo: float = 0.1, hi: float = 0.5,
                   lr: float = 1.0, body_z_max: float = 0.2) -> InverseResult:
    """Recover the attribute value whose rollout ends with body mean x at ``target_x``."""
    steps = steps if steps is not None else template.frame_count - 1
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        def objective(mu):
            s = terminal_position(model, template, mu, channel, steps, body_z_max)
            return (s.double() - target_x) ** 2

        return optimize_bounded(objective, mu0, lo, hi, lr, iters)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
