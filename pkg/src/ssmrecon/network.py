"""Full reconstruction network: alternating state-space and data-consistency blocks.

    t   = embed(x_us)
    t   = dc_i(vssm_i(t))          for i in range(depth)
    x_r = project(head(t))

The ``only_dc`` variant drops every state-space block.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data_consistency import (DcBlockParams, acquired_kspace, dc_apply,
                               hard_consistency_project)
from .errors import ConfigError, ShapeError
from .ssm import MODES, dt_rank_for
from .vssm import (Affine, VssmBlockParams, init_affine, init_vssm_block, patch_embed,
                   unpatchify, vssm_forward)

VARIANTS = ("mamba", "only_dc")

# Published parameter count of the full-size model, used as a sanity band.
REFERENCE_PARAM_COUNT = 2.05e6


@dataclass
class NetworkConfig:
    depth: int = 6
    dim: int = 128
    state_dim: int = 16
    patch: int = 2
    height: int = 64
    width: int = 64
    ncoils: int = 1
    variant: str = "mamba"
    bbar_mode: str = "zoh_full"
    expand: int = 1
    per_direction: bool = False
    mlp_ratio: float = 0.0
    conv_kernel: int = 3
    dt_rank: int = 0  # 0 -> ceil(inner / 16)

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.dim < 1 or self.state_dim < 1 or self.expand < 1:
            raise ConfigError("dim, state_dim and expand must be positive")
        if self.patch < 1 or self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"{self.height}x{self.width} not divisible by patch {self.patch}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.bbar_mode not in MODES:
            raise ConfigError(f"bbar_mode must be one of {MODES}, got {self.bbar_mode!r}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        return self

    @property
    def inner(self):
        return self.expand * self.dim

    @property
    def rank(self):
        return self.dt_rank or dt_rank_for(self.inner)


@dataclass
class NetworkParams:
    embed: Affine
    vssm: List[VssmBlockParams] = field(default_factory=list)
    dc: List[DcBlockParams] = field(default_factory=list)
    head: Affine = None


def named_tensors(obj, prefix=""):
    """Flatten a parameter structure into ``[(dotted.name, Tensor), ...]``."""
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    if obj is None:
        return []
    out = []
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out += named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
        return out
    for f in dataclasses.fields(obj):
        out += named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    return out


def build(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Deterministically initialise all parameters for ``config``."""
    config.validate()
    rng = np.random.default_rng(seed)
    pp2 = 2 * config.patch ** 2
    D = config.dim
    params = NetworkParams(embed=init_affine(pp2, D, rng))
    for _ in range(config.depth):
        if config.variant == "mamba":
            params.vssm.append(init_vssm_block(
                D, config.state_dim, rng, expand=config.expand,
                per_direction=config.per_direction, mlp_ratio=config.mlp_ratio,
                kernel=config.conv_kernel, dt_rank=config.rank))
        params.dc.append(DcBlockParams(unpatch=init_affine(D, pp2, rng),
                                       embed=init_affine(pp2, D, rng)))
    params.head = init_affine(D, pp2, rng, zero=True)
    return params


def reconstruct(x_us, M, C, params: NetworkParams, config: NetworkConfig) -> Tensor:
    """Map a zero-filled image (..., H, W, 2) to its reconstruction."""
    x_us = ad.as_tensor(x_us)
    if x_us.shape[-3:] != (config.height, config.width, 2):
        raise ShapeError(f"input {x_us.shape} does not match config "
                         f"{config.height}x{config.width}")
    p = config.patch
    acq = acquired_kspace(x_us, C, M)
    t = patch_embed(x_us, p, params.embed)
    for i, dc in enumerate(params.dc):
        if config.variant == "mamba":
            t = vssm_forward(t, params.vssm[i], mode=config.bbar_mode)
        t = dc_apply(t, x_us, C, M, dc, p, acquired=acq)
    return hard_consistency_project(unpatchify(t, p, params.head), x_us, C, M, acquired=acq)


def param_count(config: NetworkConfig) -> int:
    """Closed-form count of scalar parameters.

    affine(i, o)  = i*o + o
    embed/unpatch = affine(2p^2, D) / affine(D, 2p^2)
    vssm block    = 2D (norm1) + 2*affine(D, I) + k^2 I (dwconv) + 2I (norm2)
                    + affine(I, D) + s * (3 I N + 2 I R + 2 I)   [ssm]
                    + [mlp] 2D + affine(D, hD) + affine(hD, D)
    with I = expand*D, R the dt rank and s = 4 for per-direction weights else 1.
    """
    config.validate()

    def affine(i, o):
        return i * o + o

    D, N, I, R = config.dim, config.state_dim, config.inner, config.rank
    pp2 = 2 * config.patch ** 2
    dc_block = affine(D, pp2) + affine(pp2, D)
    total = affine(pp2, D) + affine(D, pp2) + config.depth * dc_block
    if config.variant == "mamba":
        s = 4 if config.per_direction else 1
        ssm = s * (3 * I * N + 2 * I * R + 2 * I)
        block = 2 * D + 2 * affine(D, I) + config.conv_kernel ** 2 * I + 2 * I + affine(I, D) + ssm
        if config.mlp_ratio:
            hidden = int(config.mlp_ratio * D)
            block += 2 * D + affine(D, hidden) + affine(hidden, D)
        total += config.depth * block
    return total


def count_tensors(params: NetworkParams) -> int:
    return sum(t.size for _, t in named_tensors(params))
