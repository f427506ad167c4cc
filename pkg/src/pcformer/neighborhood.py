"""Fixed-radius neighbor lists for the spatial, boundary and topology branches.

Lists are stored in CSR form: the neighbors of query ``i`` are
``indices[offsets[i]:offsets[i+1]]`` in strictly ascending order, with matching
rows of ``displacements`` (neighbor position minus query position).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .state import BoundarySet, StateError, Topology

_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class NeighborList:
    offsets: np.ndarray  # (N+1,)
    indices: np.ndarray  # (E,)
    displacements: np.ndarray  # (E, 3)

    @property
    def num_queries(self) -> int:
        return len(self.offsets) - 1

    def __len__(self):
        return len(self.indices)

    def row(self, i: int):
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return self.indices[sl], self.displacements[sl]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def queries(self) -> np.ndarray:
        """Query index of every stored pair."""
        return np.repeat(np.arange(self.num_queries), self.counts())

    def as_sets(self) -> list[set[int]]:
        return [set(self.row(i)[0].tolist()) for i in range(self.num_queries)]

    @classmethod
    def from_pairs(cls, n_queries, qi, tj, disp) -> "NeighborList":
        order = np.lexsort((tj, qi))
        qi, tj, disp = qi[order], tj[order], disp[order]
        offsets = np.zeros(n_queries + 1, dtype=np.int64)
        np.cumsum(np.bincount(qi, minlength=n_queries), out=offsets[1:])
        return cls(offsets, tj.astype(np.int64), disp.reshape(-1, 3))


def _check_positions(name, pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise StateError(name, "non-finite positions")
    return pts


def _cell_keys(cells, lo, dims):
    c = cells - lo
    return (c[..., 0] * dims[1] + c[..., 1]) * dims[2] + c[..., 2]


def radius_pairs(queries, targets, radius, exclude_self=False):
    """All (i, j) with ||targets[j] - queries[i]|| <= radius via a uniform hash grid.

    Cell size equals the radius, so every candidate lies in the 27 cells
    around the query's cell.
    """
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    if len(q) == 0 or len(t) == 0:
        return empty
    qc = np.floor(q / radius).astype(np.int64)
    tc = np.floor(t / radius).astype(np.int64)
    lo = np.minimum(qc.min(0), tc.min(0)) - 1
    dims = np.maximum(qc.max(0), tc.max(0)) - lo + 2
    if float(np.prod(dims.astype(np.float64))) > 2.0 ** 62:
        raise ValueError("scene extent too large for hash grid at this radius")
    tkeys = _cell_keys(tc, lo, dims)
    order = np.argsort(tkeys, kind="stable")
    sorted_keys = tkeys[order]

    qi_all, tj_all = [], []
    for off in _OFFSETS:
        keys = _cell_keys(qc + off, lo, dims)
        start = np.searchsorted(sorted_keys, keys, "left")
        stop = np.searchsorted(sorted_keys, keys, "right")
        cnt = stop - start
        total = int(cnt.sum())
        if total == 0:
            continue
        qi = np.repeat(np.arange(len(q)), cnt)
        within = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        qi_all.append(qi)
        tj_all.append(order[np.repeat(start, cnt) + within])
    if not qi_all:
        return empty
    qi = np.concatenate(qi_all)
    tj = np.concatenate(tj_all)
    disp = t[tj] - q[qi]
    keep = np.einsum("ij,ij->i", disp, disp) <= radius * radius
    if exclude_self:
        keep &= qi != tj
    return qi[keep], tj[keep], disp[keep]


def build_spatial(positions, radius: float) -> NeighborList:
    """Particle-particle neighbors within ``radius``, excluding the particle itself."""
    pts = _check_positions("positions", positions)
    qi, tj, disp = radius_pairs(pts, pts, radius, exclude_self=True)
    return NeighborList.from_pairs(len(pts), qi, tj, disp)


def build_boundary(positions, boundary: BoundarySet, radius: float) -> NeighborList:
    pts = _check_positions("positions", positions)
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    qi, tj, disp = radius_pairs(pts, boundary.positions, radius)
    return NeighborList.from_pairs(len(pts), qi, tj, disp)


def build_topology(topology: Topology, rest_positions) -> NeighborList:
    """1-ring adjacency of the rest mesh; displacements come from rest positions only."""
    rest = _check_positions("rest_positions", rest_positions)
    topology.check_range(len(rest))
    e = topology.edges
    qi = np.concatenate([e[:, 0], e[:, 1]])
    tj = np.concatenate([e[:, 1], e[:, 0]])
    return NeighborList.from_pairs(len(rest), qi, tj, rest[tj] - rest[qi])

