"""Ground-truth toy scenes with known physics.

Every stepper here is written independently of the learned simulator: free
flight is closed form, contact and spring scenes use semi-implicit Euler at
``substeps`` substeps per recorded frame. The force channel only ever holds
gravity; contact, friction and spring forces are what a corrector must learn.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .state import BoundarySet, Topology, Trajectory, save_trajectory

GRAVITY = (0.0, 0.0, -9.81)


def ballistic_states(x0, v0, gravity, times):
    """Closed-form x(t), v(t) for constant acceleration; arrays (T, N, 3) in float64."""
    g = np.asarray(gravity, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)[:, None, None]
    x = x0[None] + v0[None] * t + 0.5 * g * t ** 2
    v = v0[None] + g * t + 0.0 * x
    return x, v


def gen_ballistic(n_particles: int, n_frames: int, dt: float = 0.01, gravity=GRAVITY, seed: int = 0) -> Trajectory:
    if n_particles < 1:
        raise ValueError("need at least one particle")
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.1, 0.9, (n_particles, 3))
    v0 = rng.normal(0.0, 0.3, (n_particles, 3))
    m = rng.uniform(0.8, 1.2, n_particles)
    x, v = ballistic_states(x0, v0, gravity, dt * np.arange(n_frames))
    f = np.broadcast_to(m[:, None] * np.asarray(gravity), x.shape)
    return Trajectory(dt, x, v, f, m[:, None])


def floor_boundary(height: float = 0.0, spacing: float = 0.05, extent=(-0.2, 1.2)) -> BoundarySet:
    g = np.arange(extent[0], extent[1] + 1e-9, spacing)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pos = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, height)], 1)
    return BoundarySet.with_normals(pos, np.tile([0.0, 0.0, 1.0], (len(pos), 1)))


def simulate_floor(x, v, m, gravity, floor_height, k, c, dt, frames, substeps):
    """Penalty floor contact; returns float64 (frames, N, 3) positions and velocities."""
    g = np.asarray(gravity, dtype=np.float64)
    h = dt / substeps
    xs, vs = [x.copy()], [v.copy()]
    for _ in range(frames - 1):
        for _ in range(substeps):
            pen = np.maximum(0.0, floor_height - x[:, 2])
            fz = k * pen - c * v[:, 2] * (x[:, 2] < floor_height)
            acc = g + np.stack([np.zeros_like(fz), np.zeros_like(fz), fz], 1) / m[:, None]
            v = v + h * acc
            x = x + h * v
        xs.append(x.copy())
        vs.append(v.copy())
    return np.stack(xs), np.stack(vs)


def gen_floor_contact(n: int = 64, frames: int = 60, dt: float = 0.01, gravity=GRAVITY, floor_height: float = 0.0,
                      stiffness: float = 1e4, damping: float = 100.0, seed: int = 0, substeps: int = 10) -> Trajectory:
    """Independent particles dropped onto a penalty floor."""
    if stiffness <= 0:
        raise ValueError("penalty stiffness must be positive")
    rng = np.random.default_rng(seed)
    x0 = np.column_stack([rng.uniform(0.1, 0.9, (n, 2)), floor_height + rng.uniform(0.05, 0.35, n)])
    v0 = np.column_stack([rng.normal(0.0, 0.2, (n, 2)), rng.uniform(-0.5, 0.5, n)])
    m = rng.uniform(0.8, 1.2, n)
    x, v = simulate_floor(x0, v0, m, gravity, floor_height, stiffness, damping, dt, frames, substeps)
    f = np.broadcast_to(m[:, None] * np.asarray(gravity), x.shape)
    return Trajectory(dt, x, v, f, m[:, None], floor_boundary(floor_height))


def grid_edges(nx: int, ny: int) -> np.ndarray:
    idx = np.arange(nx * ny).reshape(nx, ny)
    return np.concatenate([np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], 1),
                           np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1)])


def simulate_springs(x, v, m, edges, rest, stiffness, damping, gravity, pinned, dt, frames, substeps):
    """Damped mass-spring network; pinned particles never move. float64 (frames, N, 3)."""
    g = np.asarray(gravity, dtype=np.float64)
    free = ~np.asarray(pinned, dtype=bool)
    i, j = edges[:, 0], edges[:, 1]
    h = dt / substeps
    xs, vs = [x.copy()], [v.copy()]
    for _ in range(frames - 1):
        for _ in range(substeps):
            d = x[j] - x[i]
            length = np.linalg.norm(d, axis=1)
            u = d / length[:, None]
            rel = np.einsum("ij,ij->i", v[j] - v[i], u)
            fe = (stiffness * (length - rest) + damping * rel)[:, None] * u
            f = m[:, None] * g
            np.add.at(f, i, fe)
            np.add.at(f, j, -fe)
            v = np.where(free[:, None], v + h * f / m[:, None], 0.0)
            x = x + h * v
        xs.append(x.copy())
        vs.append(v.copy())
    return np.stack(xs), np.stack(vs)


def gen_spring_lattice(dims=(8, 8), frames: int = 60, dt: float = 0.01, stiffness: float = 400.0,
                       rest_length: float = 0.08, damping: float = 1.0, pinned=None, gravity=GRAVITY,
                       seed: int = 0, substeps: int = 10, mass: float = 0.05, jitter: float = 0.3) -> Trajectory:
    """Horizontal mass-spring sheet hanging from pinned vertices.

    Attributes are (mass, pinned flag). ``pinned`` defaults to the four corners;
    the seed perturbs initial vertical velocities by up to ``jitter``.
    """
    nx, ny = dims
    if nx < 2 or ny < 2:
        raise ValueError("sheet needs at least 2 x 2 vertices")
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(np.arange(nx) * rest_length, np.arange(ny) * rest_length, indexing="ij")
    x0 = np.stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)], 1)
    x0 += np.array([0.5 - gx.max() / 2, 0.5 - gy.max() / 2, 0.6])
    n = nx * ny
    pin = np.zeros(n, dtype=bool)
    if pinned is None:
        pinned = [0, ny - 1, (nx - 1) * ny, n - 1]
    pin[np.asarray(pinned, dtype=np.int64)] = True
    v0 = np.zeros((n, 3))
    v0[:, 2] = rng.uniform(-jitter, jitter, n) if jitter else 0.0
    v0[pin] = 0.0
    m = np.full(n, mass)
    edges = grid_edges(nx, ny)
    rest = np.linalg.norm(x0[edges[:, 1]] - x0[edges[:, 0]], axis=1)
    x, v = simulate_springs(x0, v0, m, edges, rest, stiffness, damping, gravity, pin, dt, frames, substeps)
    f = np.broadcast_to(m[:, None] * np.asarray(gravity), x.shape)
    attrs = np.column_stack([m, pin.astype(np.float64)])
    return Trajectory(dt, x, v, f, attrs, BoundarySet.empty(3), Topology(edges), x0)


def slope_frame(angle_deg: float):
    """Unit downhill tangent and upward normal of a plane through the origin descending along +x."""
    a = np.radians(angle_deg)
    return np.array([np.cos(a), 0.0, -np.sin(a)]), np.array([np.sin(a), 0.0, np.cos(a)])


def simulate_slope(x, v, m, mu, normal, gravity, k, c, dt, frames, substeps):
    """Penalty contact with a plane through the origin plus regularized Coulomb friction."""
    g = np.asarray(gravity, dtype=np.float64)
    h = dt / substeps
    xs, vs = [x.copy()], [v.copy()]
    for _ in range(frames - 1):
        for _ in range(substeps):
            depth = -(x @ normal)
            contact = depth > 0
            vn = v @ normal
            fn = np.where(contact, k * depth - c * vn, 0.0)
            fn = np.maximum(fn, 0.0)
            vt = v - vn[:, None] * normal
            speed = np.linalg.norm(vt, axis=1)
            # friction may at most cancel the tangential velocity within one substep
            ft = np.minimum(mu * fn, m * speed / h)
            tdir = vt / np.maximum(speed, 1e-12)[:, None]
            f = m[:, None] * g + fn[:, None] * normal - ft[:, None] * tdir
            v = v + h * f / m[:, None]
            x = x + h * v
        xs.append(x.copy())
        vs.append(v.copy())
    return np.stack(xs), np.stack(vs)


def slope_boundary(angle_deg: float, spacing: float = 0.05, x_range=(-0.4, 1.8), y_range=(-0.4, 0.4)) -> BoundarySet:
    tangent, normal = slope_frame(angle_deg)
    s = np.arange(x_range[0], x_range[1] + 1e-9, spacing)
    y = np.arange(y_range[0], y_range[1] + 1e-9, spacing)
    ss, yy = np.meshgrid(s, y, indexing="ij")
    pos = ss.ravel()[:, None] * tangent + yy.ravel()[:, None] * np.array([0.0, 1.0, 0.0])
    return BoundarySet.with_normals(pos, np.tile(normal, (len(pos), 1)))


def gen_slope(mu: float, n_side: int = 4, frames: int = 31, dt: float = 0.02, angle_deg: float = 5.0,
              speed: float = 2.0, spacing: float = 0.05, stiffness: float = 1e4, damping: float = 100.0,
              gravity=GRAVITY, seed: int = 0, substeps: int = 10) -> Trajectory:
    """A square patch of particles launched downhill on a shallow frictional slope.

    Attributes are (mass, friction coefficient mu). The seed jitters the launch
    speed by +-20% and the start offset along the slope.
    """
    rng = np.random.default_rng(seed)
    tangent, normal = slope_frame(angle_deg)
    v_launch = speed * rng.uniform(0.8, 1.2)
    start = rng.uniform(-0.05, 0.05)
    a, b = np.meshgrid(np.arange(n_side) * spacing, (np.arange(n_side) - (n_side - 1) / 2) * spacing, indexing="ij")
    n = n_side * n_side
    m = np.ones(n)
    rest_depth = m * (-(np.asarray(gravity) @ normal)) / stiffness
    x0 = ((a.ravel() + start)[:, None] * tangent + b.ravel()[:, None] * np.array([0.0, 1.0, 0.0])
          - rest_depth[:, None] * normal)
    v0 = np.tile(v_launch * tangent, (n, 1))
    x, v = simulate_slope(x0, v0, m, mu, normal, gravity, stiffness, damping, dt, frames, substeps)
    f = np.broadcast_to(m[:, None] * np.asarray(gravity), x.shape)
    attrs = np.column_stack([m, np.full(n, mu)])
    return Trajectory(dt, x, v, f, attrs, slope_boundary(angle_deg, spacing))


SCENARIOS = {
    "ballistic": lambda seed, **kw: gen_ballistic(kw.get("particles", 64), kw.get("frames", 60), seed=seed),
    "floor": lambda seed, **kw: gen_floor_contact(kw.get("particles", 64), kw.get("frames", 60), seed=seed),
    "spring": lambda seed, **kw: gen_spring_lattice(frames=kw.get("frames", 60), seed=seed),
    "slope": lambda seed, **kw: gen_slope(0.2 + 0.2 * (seed % 10) / 9, frames=kw.get("frames", 31), seed=seed),
}


def split_tag(i: int, count: int, val_frac=0.1, test_frac=0.1) -> str:
    n_test = int(round(count * test_frac))
    n_val = int(round(count * val_frac))
    if i >= count - n_test:
        return "test"
    if i >= count - n_test - n_val:
        return "val"
    return "train"


def write_dataset(out_dir, scenario: str, count: int, seed: int = 0, workers: int = 1, **kw) -> Path:
    """Generate ``count`` trajectories plus ``manifest.txt`` (file name and split per line).

    Each sequence depends only on its own seed, so ``workers`` threads can
    build them in parallel without changing any file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = SCENARIOS[scenario]
    lines = []

    def one(i):
        name = f"{scenario}_{i:04d}.traj"
        save_trajectory(gen(seed * 100003 + i, **kw), out / name)
        return f"{name} {split_tag(i, count)}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            lines = list(pool.map(one, range(count)))
    else:
        lines = [one(i) for i in range(count)]
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> dict[str, list[Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    splits: dict[str, list[Path]] = {"train": [], "val": [], "test": []}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in splits:
            raise ValueError(f"{path}:{ln}: expected '<file> <train|val|test>'")
        splits[parts[1]].append(path.parent / parts[0])
    return splits
