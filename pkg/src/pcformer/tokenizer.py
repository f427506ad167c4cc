"""Particle tokenizer: learnable lattice kernels over three neighborhood branches.

Each branch sums ``W_k(r_ij)^T u_ij`` over its neighbors, where ``W_k`` is a
G x G x G lattice of C_in x C_out matrices interpolated trilinearly inside a
ball of radius R_k. Branch outputs are concatenated with a projection of the
particle's own (velocity, attributes) and mapped to a token by a small MLP.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .neighborhood import NeighborList
from .substrate import OpError, concat, lattice_aggregate, row_gather, trilinear_lattice_lookup

BRANCHES = ("S", "T", "B")


def kernel_eval(lattice, r, radius: float):
    """W(r) for a single 3-vector (returns C_in x C_out) or a batch (E, 3)."""
    r = torch.as_tensor(r, dtype=lattice.dtype)
    single = r.ndim == 1
    out = trilinear_lattice_lookup(lattice, r.reshape(-1, 3), radius)
    return out[0] if single else out


def branch_aggregate(lattice, r, feats, radius: float):
    """a = sum_j W(r_j)^T u_j for one query's neighborhood; zero when empty."""
    feats = torch.as_tensor(feats, dtype=lattice.dtype).reshape(-1, feats.shape[-1])
    if feats.shape[1] != lattice.shape[3]:
        raise OpError("branch_aggregate", f"feature width {feats.shape[1]} != kernel input width {lattice.shape[3]}")
    r = torch.as_tensor(r, dtype=lattice.dtype).reshape(-1, 3)
    ids = torch.zeros(len(feats), dtype=torch.long)
    return lattice_aggregate(lattice, r, feats, ids, 1, radius)[0]


@dataclass
class SceneTensors:
    """Static per-scene inputs as tensors (attributes, boundary, rest shape)."""

    attributes: torch.Tensor  # (N, C_p)
    boundary_positions: torch.Tensor  # (N_b, 3)
    boundary_attributes: torch.Tensor  # (N_b, C_b)
    rest_positions: torch.Tensor | None
    topology_neighbors: NeighborList
    topology_radius: float


def branch_features(branch: str, x, v, scene: SceneTensors, nbrs: NeighborList):
    """Per-pair (query index, displacement r, feature u) for one branch."""
    qi = torch.as_tensor(nbrs.queries(), dtype=torch.long)
    j = torch.as_tensor(nbrs.indices, dtype=torch.long)
    c = scene.attributes
    if branch == "S":
        r = row_gather(x, j) - row_gather(x, qi)
        u = concat([row_gather(v, j), row_gather(c, j)])
    elif branch == "B":
        r = row_gather(scene.boundary_positions, j) - row_gather(x, qi)
        u = row_gather(scene.boundary_attributes, j)
    elif branch == "T":
        if scene.rest_positions is None:
            raise OpError("branch_features", "topology branch requires rest positions")
        x0 = scene.rest_positions
        r = row_gather(x0, j) - row_gather(x0, qi)
        u = concat([row_gather(v, j), row_gather(c, j), r])
    else:
        raise ValueError(f"unknown branch {branch!r}")
    return qi, r, u


def canonical_order(qi, r, u):
    """Sort each query's pairs by displacement rather than neighbor index.

    Summation order then depends only on geometry, so relabeling particles
    permutes the tokens bit for bit.
    """
    rn = r.detach().cpu().numpy()
    order = np.lexsort((rn[:, 2], rn[:, 1], rn[:, 0], (rn * rn).sum(1), qi.cpu().numpy()))
    order = torch.as_tensor(order, dtype=torch.long, device=qi.device)
    return qi[order], r[order], u[order]


class Tokenizer(nn.Module):
    def __init__(self, attr_dim: int, boundary_dim: int, width: int, branch_widths: dict[str, int],
                 self_width: int, lattice_res: int = 4, attr_shift=(), attr_scale=()):
        super().__init__()
        if lattice_res < 2:
            raise ValueError("lattice resolution must be >= 2")
        self.attr_dim = attr_dim
        self.boundary_dim = boundary_dim
        self.branch_widths = dict(branch_widths)
        cin = {"S": 3 + attr_dim, "B": boundary_dim, "T": 6 + attr_dim}
        g = lattice_res
        self.lattice = nn.ParameterDict({
            k: nn.Parameter(torch.zeros(g, g, g, cin[k], self.branch_widths[k])) for k in BRANCHES
        })
        self.self_proj = nn.Linear(3 + attr_dim, self_width)
        # fixed input standardization, kept out of the checkpoint (it lives in the config)
        shift = torch.tensor(attr_shift or [0.0] * attr_dim, dtype=torch.float64)
        scale = torch.tensor(attr_scale or [1.0] * attr_dim, dtype=torch.float64)
        self.register_buffer("attr_shift", shift, persistent=False)
        self.register_buffer("attr_scale", scale, persistent=False)
        total = sum(self.branch_widths.values()) + self_width
        self.mlp = nn.Sequential(nn.Linear(total, width), nn.ReLU(), nn.Linear(width, width), nn.LayerNorm(width))

    def normalized(self, scene: SceneTensors) -> SceneTensors:
        c = scene.attributes
        c = (c - self.attr_shift.to(c.dtype)) / self.attr_scale.to(c.dtype)
        return replace(scene, attributes=c)

    def branch_outputs(self, x, v, scene: SceneTensors, neighbors: dict[str, NeighborList], radii: dict[str, float]):
        n = x.shape[0]
        out = {}
        for k in BRANCHES:
            qi, r, u = branch_features(k, x, v, scene, neighbors[k]) if len(neighbors[k]) else (None, None, None)
            if qi is None:
                out[k] = x.new_zeros((n, self.branch_widths[k])) + 0.0 * self.lattice[k].sum()
            else:
                qi, r, u = canonical_order(qi, r, u)
                out[k] = lattice_aggregate(self.lattice[k], r, u, qi, n, radii[k])
        return out

    def forward(self, x, v, scene: SceneTensors, neighbors: dict[str, NeighborList], radii: dict[str, float]):
        scene = self.normalized(scene)
        a = self.branch_outputs(x, v, scene, neighbors, radii)
        own = self.self_proj(concat([v, scene.attributes]))
        return self.mlp(concat([a["S"], a["T"], a["B"], own]))


def topology_radius(nbrs: NeighborList, factor: float = 1.5) -> float:
    """Support for the topology kernel: ``factor`` times the longest rest edge."""
    if len(nbrs) == 0:
        return 1.0
    longest = float(np.sqrt((nbrs.displacements ** 2).sum(1)).max())
    return factor * longest if longest > 0 else 1.0
