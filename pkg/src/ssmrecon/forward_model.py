"""Undersampled multi-coil encoding: masks, coil maps, encode and its adjoint.

Shapes (complex data in the 2-channel layout):

* image      ``(..., H, W, 2)``
* coil maps  ``(Nc, H, W)`` or ``(B, Nc, H, W)`` complex ndarray
* mask       ``(H, W)`` or ``(B, H, W)`` with entries in {0, 1}
* k-space    ``(..., Nc, H, W, 2)``
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .fourier import fft2c, ifft2c

# Gaussian density width as a fraction of min(H, W), keyed by acceleration.
SIGMA_FRACTION = {4: 0.15, 8: 0.10}
DEFAULT_CALIB = 8


@dataclass
class Mask:
    grid: np.ndarray
    R: float
    seed: int

    @property
    def count(self) -> int:
        return int(self.grid.sum())


def default_sigma(H: int, W: int, R: float) -> float:
    frac = SIGMA_FRACTION.get(R)
    if frac is None:
        frac = 0.15 * math.sqrt(4.0 / R)
    return frac * min(H, W)


def generate_gaussian_mask(H, W, R, calib=DEFAULT_CALIB, seed=0, sigma=None) -> Mask:
    """Variable-density random mask with exactly floor(H*W/R) samples.

    A ``calib`` x ``calib`` block around the k-space centre is always
    sampled; the remaining locations are drawn without replacement with
    probability proportional to exp(-(dx^2 + dy^2) / (2 sigma^2)).
    """
    if R <= 0:
        raise ConfigError(f"acceleration must be positive, got {R}")
    total = int(math.floor(H * W / R))
    if calib < 0 or calib > min(H, W) or calib * calib > total:
        raise ConfigError(f"calibration block {calib}x{calib} does not fit {total} samples")
    if total > H * W:
        raise ConfigError(f"cannot place {total} samples on a {H}x{W} grid")
    sigma = default_sigma(H, W, R) if sigma is None else float(sigma)
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")

    grid = np.zeros((H, W))
    cy, cx = H // 2, W // 2
    h0 = calib // 2
    grid[cy - h0:cy - h0 + calib, cx - h0:cx - h0 + calib] = 1.0

    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    density = np.exp(-(yy ** 2 + xx ** 2) / (2.0 * sigma ** 2)).ravel()
    free = np.flatnonzero(grid.ravel() == 0)
    remaining = total - calib * calib
    if remaining:
        p = density[free]
        p = p / p.sum()
        rng = np.random.default_rng(seed)
        picks = rng.choice(free, size=remaining, replace=False, p=p)
        grid.ravel()[picks] = 1.0
    return Mask(grid=grid, R=R, seed=seed)


def generate_coil_maps(H, W, ncoils, seed=0, width=0.6) -> np.ndarray:
    """Smooth synthetic sensitivities normalised so sum_c |C_c|^2 == 1.

    Each coil is a Gaussian bump centred on a ring around the field of view
    (``width`` is the bump standard deviation as a fraction of min(H, W))
    with a gentle linear phase ramp.  A single coil is the constant map 1.
    """
    if ncoils < 1:
        raise ConfigError(f"ncoils must be >= 1, got {ncoils}")
    if ncoils == 1:
        return np.ones((1, H, W), dtype=np.complex128)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid((np.arange(H) - H / 2) / min(H, W),
                         (np.arange(W) - W / 2) / min(H, W), indexing="ij")
    maps = np.empty((ncoils, H, W), dtype=np.complex128)
    for c in range(ncoils):
        angle = 2 * np.pi * c / ncoils + rng.uniform(-0.2, 0.2)
        py, px = 0.5 * np.sin(angle), 0.5 * np.cos(angle)
        mag = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * width ** 2))
        ky, kx = rng.uniform(-np.pi / 2, np.pi / 2, size=2)
        phase = ky * yy + kx * xx + rng.uniform(-np.pi, np.pi)
        maps[c] = mag * np.exp(1j * phase)
    rss = np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    return maps / rss


def _mask_array(M):
    return np.asarray(getattr(M, "grid", M), dtype=np.float64)


def _kspace_mask(M):
    m = _mask_array(M)
    return m[..., None, :, :, None]


def coil_expand(x, C) -> Tensor:
    """(..., H, W, 2) image -> (..., Nc, H, W, 2) coil images C_c * x."""
    x = ad.as_tensor(x)
    if x.shape[-3:-1] != np.shape(C)[-2:]:
        raise ShapeError(f"image {x.shape} does not match coil maps {np.shape(C)}")
    xe = ad.reshape(x, x.shape[:-3] + (1,) + x.shape[-3:])
    return ad.cmul(xe, C)


def coil_combine(imgs, C) -> Tensor:
    """Adjoint of :func:`coil_expand`: sum_c conj(C_c) * img_c."""
    return ad.tsum(ad.cmul(imgs, np.conj(C)), axis=-4)


def encode(x, C, M) -> Tensor:
    """y_c = M * fft2c(C_c * x) for every coil."""
    k = fft2c(coil_expand(x, C))
    return ad.mul(k, _kspace_mask(M))


def zero_filled(y, C, M) -> Tensor:
    """Adjoint of :func:`encode`: sum_c conj(C_c) * ifft2c(M * y_c)."""
    y = ad.as_tensor(y)
    return coil_combine(ifft2c(ad.mul(y, _kspace_mask(M))), C)


def complex_image(arr: np.ndarray) -> np.ndarray:
    """Complex (..., H, W) array -> 2-channel (..., H, W, 2) float array."""
    return ad.to_real(np.asarray(arr))
