"""Corrector network: tokenizer -> super-token encoder -> decoder -> head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import decoder as dec
from .attention import RopeConfig, TokenSet
from .decoder import Decoder, PredictionHead
from .encoder import Encoder
from .neighborhood import NeighborList, build_boundary, build_spatial, build_topology
from .state import BoundarySet, ParticleSystem, Topology, Trajectory
from .substrate import init_parameters
from .tokenizer import SceneTensors, Tokenizer, topology_radius


@dataclass
class ModelConfig:
    attr_dim: int = 1
    boundary_dim: int = 3
    width: int = 64
    lattice_res: int = 4
    width_s: int = 16
    width_t: int = 16
    width_b: int = 16
    width_self: int = 16
    radius: float = 0.1
    boundary_radius: float | None = None
    topology_factor: float = 1.5
    enc_layers: int = 3
    enc_heads: int = 4
    enc_rotary_dim: int = 12
    merge_hidden: int | None = None
    dec_layers: int = 3
    dec_heads: int = 4
    dec_rotary_dim: int = 12
    ffn_hidden: int = 128
    head_hidden: tuple[int, ...] = (32, 32)
    rope_base: float = 10000.0
    rope_scale: float | None = None
    delta_x_scale: float = 1.0
    delta_v_scale: float = 1.0
    head_zero_init: bool = True
    init_seed: int = 0
    # per-channel attribute standardization (c - shift) / scale; empty means identity
    attr_shift: tuple[float, ...] = ()
    attr_scale: tuple[float, ...] = ()

    def __post_init__(self):
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        self.attr_shift = tuple(float(a) for a in self.attr_shift)
        self.attr_scale = tuple(float(a) for a in self.attr_scale)
        for name in ("attr_shift", "attr_scale"):
            if len(getattr(self, name)) not in (0, self.attr_dim):
                raise ValueError(f"{name} needs {self.attr_dim} entries or none")
        if any(not a > 0 for a in self.attr_scale):
            raise ValueError("attr_scale entries must be positive")
        if self.width % self.enc_heads or self.width % self.dec_heads:
            raise ValueError("head counts must divide the model width")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        for heads, rot in ((self.enc_heads, self.enc_rotary_dim), (self.dec_heads, self.dec_rotary_dim)):
            if rot % 6 or rot > self.width // heads:
                raise ValueError(f"rotary dim {rot} must be a multiple of 6 and <= head dim {self.width // heads}")

    @property
    def r_boundary(self) -> float:
        return self.boundary_radius if self.boundary_radius is not None else self.radius

    @property
    def rope_spatial_scale(self) -> float:
        return self.rope_scale if self.rope_scale is not None else self.radius

    def branch_widths(self):
        return {"S": self.width_s, "T": self.width_t, "B": self.width_b}

    def head_widths(self):
        return (self.width, *self.head_hidden, 6)

    def to_dict(self):
        return dataclasses.asdict(self)


class Corrector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.tokenizer = Tokenizer(cfg.attr_dim, cfg.boundary_dim, d, cfg.branch_widths(),
                                   cfg.width_self, cfg.lattice_res, cfg.attr_shift, cfg.attr_scale)
        enc_rope = RopeConfig(cfg.enc_heads, d // cfg.enc_heads, cfg.enc_rotary_dim, cfg.rope_spatial_scale, cfg.rope_base)
        dec_rope = RopeConfig(cfg.dec_heads, d // cfg.dec_heads, cfg.dec_rotary_dim, cfg.rope_spatial_scale, cfg.rope_base)
        self.encoder = Encoder(d, cfg.enc_layers, enc_rope, cfg.merge_hidden or d)
        self.decoder = Decoder(d, cfg.dec_layers, dec_rope, cfg.ffn_hidden)
        self.head = PredictionHead(cfg.head_widths())
        self.reset_parameters(cfg.init_seed)

    def reset_parameters(self, seed: int):
        init_parameters(self, torch.Generator().manual_seed(seed))
        if self.cfg.head_zero_init:
            nn.init.zeros_(self.head.final.weight)
            nn.init.zeros_(self.head.final.bias)

    def zero_output_projections(self):
        """Zero every residual branch output so the corrector returns exactly zero."""
        with torch.no_grad():
            for name, mod in self.named_modules():
                if name.endswith(".wo") or name.endswith(".w2"):
                    mod.weight.zero_()
                    mod.bias.zero_()
            self.head.final.weight.zero_()
            self.head.final.bias.zero_()

    def radii(self, scene: SceneTensors):
        return {"S": self.cfg.radius, "B": self.cfg.r_boundary, "T": scene.topology_radius}

    def forward(self, x, v, scene: SceneTensors, neighbors: dict[str, NeighborList] | None = None,
                return_details=False):
        if neighbors is None:
            neighbors = build_neighbors(x.detach().cpu().numpy(), scene, self.cfg)
        h = self.tokenizer(x, v, scene, neighbors, self.radii(scene))
        particles = TokenSet.level0(h, x)
        supertokens, sizes = self.encoder(particles)
        refined = self.decoder(particles, supertokens)
        dx, dv = self.head(refined.tokens)
        dx, dv = dx * self.cfg.delta_x_scale, dv * self.cfg.delta_v_scale
        if return_details:
            return dx, dv, {"tokens": h, "supertokens": supertokens, "sizes": sizes, "refined": refined.tokens}
        return dx, dv


def build_neighbors(x: np.ndarray, scene: SceneTensors, cfg: ModelConfig) -> dict[str, NeighborList]:
    bpos = scene.boundary_positions.detach().cpu().numpy()
    return {
        "S": build_spatial(x, cfg.radius),
        "B": build_boundary(x, BoundarySet(bpos, np.zeros((len(bpos), 0))), cfg.r_boundary),
        "T": scene.topology_neighbors,
    }


def make_scene(attributes, boundary: BoundarySet | None = None, topology: Topology | None = None,
               rest_positions=None, dtype=torch.float32, topology_factor: float = 1.5) -> SceneTensors:
    boundary = boundary if boundary is not None else BoundarySet.empty()
    topology = topology if topology is not None else Topology()
    attributes = torch.as_tensor(np.asarray(attributes), dtype=dtype)
    n = attributes.shape[0]
    if len(topology):
        if rest_positions is None:
            raise ValueError("topology given without rest positions")
        tnb = build_topology(topology, rest_positions)
        rest = torch.as_tensor(np.asarray(rest_positions), dtype=dtype)
    else:
        tnb = NeighborList.from_pairs(n, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
        rest = None if rest_positions is None else torch.as_tensor(np.asarray(rest_positions), dtype=dtype)
    return SceneTensors(
        attributes=attributes,
        boundary_positions=torch.as_tensor(boundary.positions, dtype=dtype),
        boundary_attributes=torch.as_tensor(boundary.attributes, dtype=dtype),
        rest_positions=rest,
        topology_neighbors=tnb,
        topology_radius=topology_radius(tnb, topology_factor),
    )


def scene_from_trajectory(traj: Trajectory, dtype=torch.float32, topology_factor=1.5) -> SceneTensors:
    return make_scene(traj.attributes, traj.boundary, traj.topology, traj.rest_positions, dtype, topology_factor)


def scene_from_system(system: ParticleSystem, boundary=None, topology=None, dtype=torch.float32,
                      topology_factor=1.5) -> SceneTensors:
    rest = system.rest_positions
    if topology is not None and len(topology) and rest is None:
        rest = system.positions
    return make_scene(system.attributes, boundary, topology, rest, dtype, topology_factor)


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts per module (matches the instantiated model)."""
    d = cfg.width
    cin = {"S": 3 + cfg.attr_dim, "B": cfg.boundary_dim, "T": 6 + cfg.attr_dim}
    g3 = cfg.lattice_res ** 3
    bw = cfg.branch_widths()
    tok = sum(g3 * cin[k] * bw[k] for k in bw)
    tok += dec.linear_count(3 + cfg.attr_dim, cfg.width_self)
    tok += dec.linear_count(sum(bw.values()) + cfg.width_self, d) + dec.linear_count(d, d) + 2 * d
    enc = cfg.enc_layers * (dec.attention_count(d) + dec.ffn_count(d, cfg.merge_hidden or d))
    decoder = cfg.dec_layers * (dec.attention_count(d, cross=True) + dec.attention_count(d) + dec.ffn_count(d, cfg.ffn_hidden))
    head = dec.head_param_count(cfg.head_widths())
    counts = {"tokenizer": tok, "encoder": enc, "decoder": decoder, "head": head}
    counts["total"] = sum(counts.values())
    return counts
