"""Visual state-space block on a token grid.

Tokens live in a ``(..., gh, gw, D)`` grid.  The block unfolds the grid
along four traversal orders, scans each sequence, maps every result back to
grid order and sums them, then gates and projects with a residual.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .ssm import SSMParams, init_ssm_params, selective_scan

N_DIRECTIONS = 4


@dataclass
class Affine:
    W: Tensor
    b: Tensor

    def __call__(self, x):
        return ad.linear(x, self.W, self.b)


@dataclass
class Norm:
    g: Tensor
    b: Tensor

    def __call__(self, x):
        return ad.layer_norm(x, self.g, self.b)


@dataclass
class VssmBlockParams:
    norm1: Norm
    in_proj: Affine
    gate_proj: Affine
    conv: Tensor
    ssm: SSMParams
    norm2: Norm
    out_proj: Affine
    mlp_norm: Optional[Norm] = None
    fc1: Optional[Affine] = None
    fc2: Optional[Affine] = None


def init_affine(din, dout, rng, zero=False) -> Affine:
    if zero:
        W, b = np.zeros((din, dout)), np.zeros(dout)
    else:
        bound = 1.0 / math.sqrt(din)
        W, b = rng.uniform(-bound, bound, (din, dout)), rng.uniform(-bound, bound, dout)
    return Affine(Tensor(W, requires_grad=True), Tensor(b, requires_grad=True))


def init_norm(dim) -> Norm:
    return Norm(Tensor(np.ones(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))


# ---------------------------------------------------------------------------
# Patch embedding
# ---------------------------------------------------------------------------

def _grid(H, W, p):
    if p < 1 or H % p or W % p:
        raise ConfigError(f"image {H}x{W} is not divisible by patch size {p}")
    return H // p, W // p


def patch_embed(x, p: int, proj: Affine) -> Tensor:
    """Strided p x p convolution from the 2 re/im channels to D channels.

    x: (..., H, W, 2) -> (..., H/p, W/p, D).  The weight rows are ordered
    (row in patch, column in patch, channel).
    """
    x = ad.as_tensor(x)
    lead = x.shape[:-3]
    H, W = x.shape[-3], x.shape[-2]
    gh, gw = _grid(H, W, p)
    n = len(lead)
    t = ad.reshape(x, lead + (gh, p, gw, p, 2))
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    t = ad.transpose(t, perm)
    t = ad.reshape(t, lead + (gh, gw, p * p * 2))
    return proj(t)


def unpatchify(t, p: int, proj: Affine) -> Tensor:
    """Per-token linear map D -> 2p^2, rearranged into a (..., H, W, 2) image."""
    t = ad.as_tensor(t)
    if proj.W.shape[1] != 2 * p * p:
        raise ShapeError(f"unpatchify weight {proj.W.shape} does not produce 2*{p}^2 outputs")
    lead = t.shape[:-3]
    gh, gw = t.shape[-3], t.shape[-2]
    n = len(lead)
    y = ad.reshape(proj(t), lead + (gh, gw, p, p, 2))
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    y = ad.transpose(y, perm)
    return ad.reshape(y, lead + (gh * p, gw * p, 2))


# ---------------------------------------------------------------------------
# Four-direction unfolding
# ---------------------------------------------------------------------------

def direction_orders(gh: int, gw: int) -> np.ndarray:
    """(4, L) grid indices visited by each traversal.

    0: row-major from the top-left, 1: its reverse (from the bottom-right),
    2: column-major from the top-left, 3: its reverse.
    """
    row = np.arange(gh * gw)
    col = row.reshape(gh, gw).T.ravel()
    return np.stack([row, row[::-1], col, col[::-1]])


def _inverse(orders):
    inv = np.empty_like(orders)
    for k, o in enumerate(orders):
        inv[k, o] = np.arange(o.size)
    return inv


def _gather(flat, orders):
    # flat (..., L, D) -> (..., K, L, D)
    return flat[..., orders, :]


def _scatter_sum(seqs, inv):
    # seqs (..., K, L, D) -> (..., L, D), summing in direction order
    out = seqs[..., 0, inv[0], :].copy()
    for k in range(1, inv.shape[0]):
        out += seqs[..., k, inv[k], :]
    return out


def unfold_directions(t) -> Tensor:
    """(..., gh, gw, D) grid -> (..., 4, L, D) directional sequences."""
    t = ad.as_tensor(t)
    gh, gw, D = t.shape[-3:]
    lead = t.shape[:-3]
    orders = direction_orders(gh, gw)
    inv = _inverse(orders)
    seqs = _gather(t.data.reshape(lead + (gh * gw, D)), orders)

    def rule(g):
        return (_scatter_sum(g, inv).reshape(t.shape),)

    return Tensor._result(seqs, (t,), rule, "unfold_directions")


def fold_merge(seqs, gh: int, gw: int) -> Tensor:
    """(..., 4, L, D) sequences -> grid: undo each traversal, then sum."""
    seqs = ad.as_tensor(seqs)
    if seqs.shape[-3] != N_DIRECTIONS or seqs.shape[-2] != gh * gw:
        raise ShapeError(f"fold_merge: got {seqs.shape} for a {gh}x{gw} grid")
    lead = seqs.shape[:-3]
    D = seqs.shape[-1]
    orders = direction_orders(gh, gw)
    inv = _inverse(orders)
    grid = _scatter_sum(seqs.data, inv).reshape(lead + (gh, gw, D))

    def rule(g):
        return (_gather(g.reshape(lead + (gh * gw, D)), orders),)

    return Tensor._result(grid, (seqs,), rule, "fold_merge")


# ---------------------------------------------------------------------------
# The block
# ---------------------------------------------------------------------------

def init_vssm_block(dim, state_dim, rng, expand=1, per_direction=False, mlp_ratio=0,
                    kernel=3, dt_rank=None) -> VssmBlockParams:
    inner = expand * dim
    conv = rng.uniform(-1.0 / kernel, 1.0 / kernel, (kernel, kernel, inner))
    params = VssmBlockParams(
        norm1=init_norm(dim),
        in_proj=init_affine(dim, inner, rng),
        gate_proj=init_affine(dim, inner, rng),
        conv=Tensor(conv, requires_grad=True),
        ssm=init_ssm_params(inner, state_dim, rng, rank=dt_rank,
                            directions=N_DIRECTIONS if per_direction else None),
        norm2=init_norm(inner),
        out_proj=init_affine(inner, dim, rng),
    )
    if mlp_ratio:
        hidden = int(mlp_ratio * dim)
        params.mlp_norm = init_norm(dim)
        params.fc1 = init_affine(dim, hidden, rng)
        params.fc2 = init_affine(hidden, dim, rng)
    return params


def vssm_forward(t, params: VssmBlockParams, mode="zoh_full") -> Tensor:
    """Pre-norm gated block with a four-direction selective scan and residual."""
    t = ad.as_tensor(t)
    lead = t.shape[:-3]
    gh, gw = t.shape[-3], t.shape[-2]
    u = params.norm1(t)
    main = ad.silu(ad.depthwise_conv2d(params.in_proj(u), params.conv))
    inner = main.shape[-1]
    seqs = unfold_directions(main)
    batch = int(np.prod(lead)) if lead else 1
    seqs = ad.reshape(seqs, (batch, N_DIRECTIONS, gh * gw, inner))
    scanned = selective_scan(seqs, params.ssm, mode=mode)
    scanned = ad.reshape(scanned, lead + (N_DIRECTIONS, gh * gw, inner))
    s = params.norm2(fold_merge(scanned, gh, gw))
    gate = ad.silu(params.gate_proj(u))
    out = ad.add(params.out_proj(ad.mul(s, gate)), t)
    if params.fc1 is not None:
        hidden = ad.silu(params.fc1(params.mlp_norm(out)))
        out = ad.add(params.fc2(hidden), out)
    return out
