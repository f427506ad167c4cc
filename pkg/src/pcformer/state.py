"""Lagrangian particle state, boundary samples, rest topology and trajectories.

Attribute channel 0 is always the particle mass; the remaining channels are
dataset-defined (normalized material parameters, friction, ...).

Trajectory files use a small chunked little-endian binary layout::

    b"WPTRAJ1"
    u32 N, N_b, C_p, C_b, W_total, E
    f64 dt
    f32 X0[N,3]            (only when E > 0)
    f32 C[N,C_p]
    f32 Xb[N_b,3], Cb[N_b,C_b]
    u32 edges[E,2]
    per frame: f32 X[N,3], V[N,3], F[N,3]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASS_CHANNEL = 0
TRAJ_MAGIC = b"WPTRAJ1"
_HEADER = struct.Struct("<6I d")


class StateError(ValueError):
    """Invalid particle state; ``field`` names the offending array."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrajectoryFormatError(StateError):
    pass


def _as_array(name, value, cols=None, dtype=None):
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if arr.ndim == 1 and cols is not None and arr.size == 0:
        arr = arr.reshape(0, cols)
    if arr.ndim != 2 or (cols is not None and arr.shape[1] != cols):
        raise StateError(name, f"expected shape (n, {cols}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise StateError(name, "contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class Topology:
    """Undirected rest-shape edges, stored once per pair as (min, max)."""

    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if np.any(e[:, 0] == e[:, 1]):
            raise StateError("edges", "self-loop edge")
        if np.any(e < 0):
            raise StateError("edges", "negative vertex index")
        e = np.unique(np.sort(e, axis=1), axis=0) if len(e) else e
        object.__setattr__(self, "edges", e)

    def __len__(self):
        return len(self.edges)

    def check_range(self, n: int):
        if len(self.edges) and self.edges.max() >= n:
            raise StateError("edges", f"vertex index {int(self.edges.max())} out of range for N={n}")

    def adjacency(self, i: int) -> np.ndarray:
        e = self.edges
        return np.sort(np.concatenate([e[e[:, 0] == i, 1], e[e[:, 1] == i, 0]]))


@dataclass(frozen=True, eq=False)
class BoundarySet:
    positions: np.ndarray
    attributes: np.ndarray

    def __post_init__(self):
        pos = _as_array("boundary.positions", self.positions, 3)
        attr = np.asarray(self.attributes)
        if attr.ndim == 1 and attr.size == 0:
            attr = attr.reshape(len(pos), 0)
        attr = _as_array("boundary.attributes", attr)
        if len(attr) != len(pos):
            raise StateError("boundary.attributes", f"{len(attr)} rows for {len(pos)} samples")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "attributes", attr)

    @classmethod
    def empty(cls, channels: int = 0) -> "BoundarySet":
        return cls(np.zeros((0, 3)), np.zeros((0, channels)))

    @classmethod
    def with_normals(cls, positions, normals, extra=None) -> "BoundarySet":
        """Boundary samples whose first three attribute channels are unit normals."""
        normals = _as_array("boundary.normals", normals, 3)
        if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > 1e-6:
            raise StateError("boundary.normals", "normals must have unit length")
        attr = normals if extra is None else np.concatenate([normals, np.asarray(extra).reshape(len(normals), -1)], 1)
        return cls(positions, attr)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def channels(self) -> int:
        return self.attributes.shape[1]

    def translated(self, shift) -> "BoundarySet":
        return BoundarySet(self.positions + np.asarray(shift), self.attributes)


@dataclass(frozen=True, eq=False)
class ParticleSystem:
    positions: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray
    attributes: np.ndarray
    rest_positions: np.ndarray | None = None

    def __post_init__(self):
        pos = _as_array("positions", self.positions, 3)
        n = len(pos)
        if n < 1:
            raise StateError("positions", "need at least one particle")
        arrays = {"positions": pos}
        for name in ("velocities", "forces"):
            arrays[name] = _as_array(name, getattr(self, name), 3)
        attr = _as_array("attributes", self.attributes)
        if attr.shape[1] < 1:
            raise StateError("attributes", "mass channel is mandatory")
        if np.any(attr[:, MASS_CHANNEL] <= 0):
            raise StateError("attributes", "mass channel must be strictly positive")
        arrays["attributes"] = attr
        if self.rest_positions is not None:
            arrays["rest_positions"] = _as_array("rest_positions", self.rest_positions, 3)
        for name, arr in arrays.items():
            if len(arr) != n:
                raise StateError(name, f"leading dimension {len(arr)} != N={n}")
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def masses(self) -> np.ndarray:
        return self.attributes[:, MASS_CHANNEL]

    def replace(self, **changes) -> "ParticleSystem":
        kw = dict(positions=self.positions, velocities=self.velocities, forces=self.forces,
                  attributes=self.attributes, rest_positions=self.rest_positions)
        kw.update(changes)
        return ParticleSystem(**kw)


def mass_matrix_inverse_apply(system: ParticleSystem, forces) -> np.ndarray:
    """Apply M^-1 (diagonal, masses from attribute channel 0) to an N x 3 force array."""
    m = system.masses
    if np.any(m <= 0):
        raise StateError("attributes", "mass channel must be strictly positive")
    f = _as_array("forces", forces, 3)
    if len(f) != len(m):
        raise StateError("forces", f"{len(f)} rows for {len(m)} particles")
    return f / m[:, None]


def zero_fill_absent(system: ParticleSystem, topology: Topology | None = None,
                     boundary: BoundarySet | None = None):
    """Substitute empty structures for inputs a domain does not provide.

    Provided inputs are returned untouched. Empty topology / boundary sets make
    the corresponding tokenizer branches sum over nothing, i.e. exactly zero.
    """
    if topology is None:
        topology = Topology()
    if boundary is None:
        boundary = BoundarySet.empty()
    topology.check_range(system.count)
    if len(topology) and system.rest_positions is None:
        system = system.replace(rest_positions=system.positions.copy())
    return system, topology, boundary


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-indexed particle states with shared static data.

    All float payloads are stored as float32, which is the on-disk precision,
    so save/load round-trips are bit-exact.
    """

    dt: float
    positions: np.ndarray  # (W, N, 3)
    velocities: np.ndarray
    forces: np.ndarray
    attributes: np.ndarray  # (N, C_p)
    boundary: BoundarySet = field(default_factory=BoundarySet.empty)
    topology: Topology = field(default_factory=Topology)
    rest_positions: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise StateError("dt", f"must be positive and finite, got {self.dt}")
        object.__setattr__(self, "dt", float(self.dt))
        pos = np.asarray(self.positions, dtype=np.float32)
        if pos.ndim != 3 or pos.shape[2] != 3 or pos.shape[0] < 1 or pos.shape[1] < 1:
            raise StateError("positions", f"expected (W, N, 3), got {pos.shape}")
        for name in ("positions", "velocities", "forces"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != pos.shape:
                raise StateError(name, f"shape {arr.shape} != {pos.shape}")
            if not np.all(np.isfinite(arr)):
                raise StateError(name, "contains non-finite values")
            object.__setattr__(self, name, arr)
        n = pos.shape[1]
        attr = _as_array("attributes", self.attributes, dtype=np.float32)
        if len(attr) != n:
            raise StateError("attributes", f"leading dimension {len(attr)} != N={n}")
        if attr.shape[1] < 1 or np.any(attr[:, MASS_CHANNEL] <= 0):
            raise StateError("attributes", "mass channel must be present and strictly positive")
        object.__setattr__(self, "attributes", attr)
        b = self.boundary
        object.__setattr__(self, "boundary", BoundarySet(b.positions.astype(np.float32), b.attributes.astype(np.float32)))
        self.topology.check_range(n)
        rest = self.rest_positions
        if not len(self.topology):
            rest = None
        elif rest is None:
            rest = pos[0]
        if rest is not None:
            rest = _as_array("rest_positions", rest, 3, dtype=np.float32)
            if len(rest) != n:
                raise StateError("rest_positions", f"leading dimension {len(rest)} != N={n}")
        object.__setattr__(self, "rest_positions", rest)

    @property
    def frame_count(self) -> int:
        return self.positions.shape[0]

    @property
    def count(self) -> int:
        return self.positions.shape[1]

    def frame(self, k: int) -> ParticleSystem:
        return ParticleSystem(self.positions[k], self.velocities[k], self.forces[k],
                              self.attributes, self.rest_positions)

    def window(self, start: int, length: int) -> "Trajectory":
        sl = slice(start, start + length)
        return Trajectory(self.dt, self.positions[sl], self.velocities[sl], self.forces[sl],
                          self.attributes, self.boundary, self.topology, self.rest_positions)

    def equals(self, other: "Trajectory") -> bool:
        """Bit-exact comparison of every payload."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return (self.dt == other.dt
                and all(same(getattr(self, k), getattr(other, k))
                        for k in ("positions", "velocities", "forces", "attributes", "rest_positions"))
                and same(self.boundary.positions, other.boundary.positions)
                and same(self.boundary.attributes, other.boundary.attributes)
                and np.array_equal(self.topology.edges, other.topology.edges))


def save_trajectory(traj: Trajectory, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    n, cp, nb, cb = traj.count, traj.attributes.shape[1], traj.boundary.count, traj.boundary.channels
    edges = traj.topology.edges
    f32 = np.dtype("<f4")
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(_HEADER.pack(n, nb, cp, cb, traj.frame_count, len(edges), traj.dt))
        if len(edges):
            fh.write(traj.rest_positions.astype(f32).tobytes())
        fh.write(traj.attributes.astype(f32).tobytes())
        fh.write(traj.boundary.positions.astype(f32).tobytes())
        fh.write(traj.boundary.attributes.astype(f32).tobytes())
        fh.write(edges.astype("<u4").tobytes())
        frames = np.stack([traj.positions, traj.velocities, traj.forces], axis=1)
        fh.write(frames.astype(f32).tobytes())


def load_trajectory(path) -> Trajectory:
    data = Path(path).read_bytes()
    if data[:len(TRAJ_MAGIC)] != TRAJ_MAGIC:
        raise TrajectoryFormatError("header", "bad magic, not a trajectory file")
    off = len(TRAJ_MAGIC)
    if len(data) < off + _HEADER.size:
        raise TrajectoryFormatError("header", "truncated header")
    n, nb, cp, cb, w, ne, dt = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    if n < 1 or w < 1 or cp < 1:
        raise TrajectoryFormatError("header", f"invalid counts N={n} W={w} C_p={cp}")

    def take(name, count, dtype, shape):
        nonlocal off
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(data):
            raise TrajectoryFormatError(name, "truncated payload")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise TrajectoryFormatError(name, "non-finite payload")
        return arr.astype(arr.dtype.newbyteorder("="))

    rest = take("rest_positions", n * 3, "<f4", (n, 3)) if ne else None
    attr = take("attributes", n * cp, "<f4", (n, cp))
    bpos = take("boundary.positions", nb * 3, "<f4", (nb, 3))
    battr = take("boundary.attributes", nb * cb, "<f4", (nb, cb))
    edges = take("edges", ne * 2, "<u4", (ne, 2)).astype(np.int64)
    frames = take("frames", w * 3 * n * 3, "<f4", (w, 3, n, 3))
    if off != len(data):
        raise TrajectoryFormatError("frames", f"{len(data) - off} trailing bytes (dimension mismatch)")
    try:
        return Trajectory(dt, frames[:, 0], frames[:, 1], frames[:, 2], attr,
                          BoundarySet(bpos, battr), Topology(edges), rest)
    except StateError as err:
        raise TrajectoryFormatError(err.field, str(err)) from err
