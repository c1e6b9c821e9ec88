"""Hard k-space data consistency between backbone blocks.

Network-predicted k-space is kept only off the sampling mask; on the mask it
is overwritten with the k-space of the undersampled input image, coil by
coil, before the coils are recombined.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .forward_model import _kspace_mask, coil_combine, coil_expand
from .fourier import fft2c, ifft2c
from .vssm import Affine, patch_embed, unpatchify


@dataclass
class DcBlockParams:
    unpatch: Affine
    embed: Affine


def acquired_kspace(x_us, C, M) -> Tensor:
    """Masked per-coil k-space of the undersampled input, M * fft2c(C x_us)."""
    return ad.mul(fft2c(coil_expand(x_us, C)), _kspace_mask(M))


def replaced_kspace(x, x_us, C, M, acquired=None) -> Tensor:
    """Per-coil k-space after replacement (before coil combination).

    ``acquired`` may carry a precomputed :func:`acquired_kspace` so that a
    stack of blocks sharing one input transforms it only once.
    """
    m = _kspace_mask(M)
    predicted = ad.mul(fft2c(coil_expand(x, C)), 1.0 - m)
    if acquired is None:
        acquired = acquired_kspace(x_us, C, M)
    return ad.add(predicted, acquired)


def hard_consistency_project(x, x_us, C, M, acquired=None) -> Tensor:
    """Image whose per-coil k-space agrees with ``x_us`` on the mask."""
    return coil_combine(ifft2c(replaced_kspace(x, x_us, C, M, acquired)), C)


def dc_apply(x_p, x_us, C, M, params: DcBlockParams, p: int, acquired=None) -> Tensor:
    """Token grid -> image -> hard consistency -> SiLU -> token grid."""
    x_img = unpatchify(x_p, p, params.unpatch)
    x_dc = hard_consistency_project(x_img, x_us, C, M, acquired)
    return patch_embed(ad.silu(x_dc), p, params.embed)


def zero_mask_like(M) -> np.ndarray:
    return np.zeros_like(np.asarray(getattr(M, "grid", M), dtype=np.float64))
