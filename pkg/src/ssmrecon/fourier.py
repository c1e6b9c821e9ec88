"""Centered orthonormal 2D Fourier transforms built on an iterative radix-2 FFT.

The k-space DC coefficient sits at grid index (H/2, W/2).  Both directions
scale by 1/sqrt(H*W), so the forward transform is unitary and its adjoint is
the inverse transform.  The centring shifts are folded into the gather and
scatter index maps of the compiled kernel.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numba import njit

from .autodiff import Tensor, as_tensor, to_complex, to_real
from .errors import ConfigError


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _plan(n: int, inverse: bool, centered: bool):
    """(gather index, twiddles) for a length-``n`` transform."""
    if not is_power_of_two(n):
        raise ConfigError(f"radix-2 FFT needs a power-of-two length, got {n}")
    gather = _bit_reversal(n)
    if centered:
        gather = (gather + n // 2) % n  # ifftshift before the transform
    sign = 1.0 if inverse else -1.0
    tw = np.exp(sign * 2j * np.pi * np.arange(max(n // 2, 1)) / n)
    return gather, tw


@njit(cache=True)
def _butterflies_rows(buf, tw):
    # in-place radix-2 DIT over axis 1 of buf (rows already bit-reversed)
    R, n = buf.shape
    m = 2
    while m <= n:
        half = m // 2
        stride = n // m
        for r in range(R):
            for start in range(0, n, m):
                for j in range(half):
                    w = tw[j * stride]
                    a = buf[r, start + j]
                    b = w * buf[r, start + j + half]
                    buf[r, start + j] = a + b
                    buf[r, start + j + half] = a - b
        m *= 2


@njit(cache=True)
def _butterflies_cols(buf, tw):
    # in-place radix-2 DIT over axis 0, vectorised across the columns
    n, W = buf.shape
    m = 2
    while m <= n:
        half = m // 2
        stride = n // m
        for start in range(0, n, m):
            for j in range(half):
                w = tw[j * stride]
                top = buf[start + j]
                bot = buf[start + j + half]
                for c in range(W):
                    a = top[c]
                    b = w * bot[c]
                    top[c] = a + b
                    bot[c] = a - b
        m *= 2


@njit(cache=True)
def _fft2_kernel(x, out, gh, gw, twh, tww, shift_h, shift_w, scale):
    B, H, W = x.shape
    rows = np.empty((H, W), dtype=np.complex128)
    cols = np.empty((H, W), dtype=np.complex128)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                rows[i, j] = x[b, i, gw[j]]
        _butterflies_rows(rows, tww)
        for i in range(H):
            src = rows[gh[i]]
            for k in range(W):
                cols[i, (k + shift_w) % W] = src[k]
        _butterflies_cols(cols, twh)
        for i in range(H):
            dst = out[b, (i + shift_h) % H]
            for k in range(W):
                dst[k] = cols[i, k] * scale
    return out


def _transform2(x: np.ndarray, inverse: bool, centered: bool, scale: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    H, W = x.shape[-2:]
    _check_dims(H, W)
    gh, twh = _plan(H, inverse, centered)
    gw, tww = _plan(W, inverse, centered)
    flat = np.ascontiguousarray(x.reshape((-1, H, W)))
    out = np.empty_like(flat)
    _fft2_kernel(flat, out, gh, gw, twh, tww, H // 2 if centered else 0,
                 W // 2 if centered else 0, scale)
    return out.reshape(x.shape)


def fft_last_axis(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised DFT along the last axis (sign +1 in the exponent if ``inverse``)."""
    a = np.asarray(a, dtype=np.complex128)
    n = a.shape[-1]
    gather, tw = _plan(n, inverse, False)
    buf = np.ascontiguousarray(a.reshape((-1, n))[:, gather])
    _butterflies_rows(buf, tw)
    return buf.reshape(a.shape)


def _check_dims(H, W):
    if not (is_power_of_two(H) and is_power_of_two(W)):
        raise ConfigError(f"image dims must be powers of two, got {H}x{W}")


def fft2c_np(x: np.ndarray) -> np.ndarray:
    """Centered unitary 2D DFT of a complex array over its last two axes."""
    H, W = np.shape(x)[-2:]
    return _transform2(x, False, True, 1.0 / np.sqrt(H * W))


def ifft2c_np(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c_np`."""
    H, W = np.shape(k)[-2:]
    return _transform2(k, True, True, 1.0 / np.sqrt(H * W))


def fft2c(x) -> Tensor:
    """Differentiable centered FFT on (..., H, W, 2) tensors."""
    x = as_tensor(x)
    y = to_real(fft2c_np(to_complex(x.data)))
    return Tensor._result(y, (x,), lambda g: (to_real(ifft2c_np(to_complex(g))),), "fft2c")


def ifft2c(k) -> Tensor:
    """Differentiable centered inverse FFT on (..., H, W, 2) tensors."""
    k = as_tensor(k)
    y = to_real(ifft2c_np(to_complex(k.data)))
    return Tensor._result(y, (k,), lambda g: (to_real(fft2c_np(to_complex(g))),), "ifft2c")
