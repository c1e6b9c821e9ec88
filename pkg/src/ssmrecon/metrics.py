"""Image quality metrics, effective receptive fields and small writers.

All metrics act on real magnitude images.  SSIM uses an 11x11 Gaussian
window (sigma 1.5) evaluated only where the window fits inside the image,
with K1 = 0.01, K2 = 0.03 and a dynamic range defaulting to max(ref).
"""
from __future__ import annotations

import csv
import math
import re

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .errors import ConfigError, ContractError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def magnitude(img) -> np.ndarray:
    """(..., H, W, 2) two-channel image -> (..., H, W) magnitude."""
    img = np.asarray(img, dtype=np.float64)
    return np.hypot(img[..., 0], img[..., 1])


def psnr(x, ref) -> float:
    """10 log10(max(ref)^2 / MSE); ``inf`` when the images are identical."""
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"psnr: {x.shape} vs {ref.shape}")
    peak = ref.max()
    if peak <= 0:
        raise ContractError("psnr: reference maximum must be positive")
    mse = np.mean((x - ref) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, ref, data_range=None) -> np.ndarray:
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape or x.ndim != 2:
        raise ShapeError(f"ssim: need two equal 2D images, got {x.shape} and {ref.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ConfigError(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    L = ref.max() if data_range is None else float(data_range)
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    w = gaussian_window()

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, w.shape), w)

    mx, my = filt(x), filt(ref)
    vx = filt(x * x) - mx * mx
    vy = filt(ref * ref) - my * my
    cxy = filt(x * ref) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(x, ref, data_range=None) -> float:
    """Mean structural similarity of magnitude image ``x`` against ``ref``."""
    return float(ssim_map(x, ref, data_range).mean())


# ---------------------------------------------------------------------------
# Effective receptive field
# ---------------------------------------------------------------------------

def effective_receptive_field(model_fn, inputs) -> np.ndarray:
    """Average |d |out[centre]| / d input| over ``inputs``, normalised to max 1.

    ``model_fn(x, k)`` maps the k-th input, a (H, W, 2) tensor, to a (H, W, 2)
    tensor.  The per-pixel gradient magnitude combines the real and
    imaginary input channels.
    """
    acc, count = None, 0
    for k, x in enumerate(inputs):
        count += 1
        xt = ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        out = model_fn(xt, k)
        H, W = out.shape[-3], out.shape[-2]
        centre = ad.complex_abs(out[H // 2, W // 2])
        g = ad.backward(centre).get(xt)
        g = np.zeros(xt.shape) if g is None else g
        mag = np.hypot(g[..., 0], g[..., 1])
        acc = mag if acc is None else acc + mag
    if acc is None:
        raise ContractError("effective_receptive_field needs at least one input")
    acc /= count
    peak = acc.max()
    return acc / peak if peak > 0 else acc


def _radius_grid(shape):
    H, W = shape
    yy, xx = np.meshgrid(np.arange(H) - H // 2, np.arange(W) - W // 2, indexing="ij")
    return yy, xx


def mass_outside(erf: np.ndarray, radius: float) -> float:
    """Fraction of ERF mass at Euclidean distance > ``radius`` from the centre."""
    yy, xx = _radius_grid(erf.shape)
    total = erf.sum()
    if total == 0:
        return 0.0
    return float(erf[np.hypot(yy, xx) > radius].sum() / total)


def support_radius(erf: np.ndarray) -> int:
    """Largest Chebyshev distance from the centre of a nonzero ERF entry."""
    yy, xx = _radius_grid(erf.shape)
    nz = erf != 0
    if not nz.any():
        return -1
    return int(np.maximum(np.abs(yy), np.abs(xx))[nz].max())


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    peak = img.max()
    scaled = img / peak if peak > 0 else np.zeros_like(img)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img) -> None:
    """Binary PGM (P5) of a nonnegative image, max-normalised to 0..255."""
    data = to_uint8(img)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise ConfigError(f"{path}: not an 8-bit P5 image")
    W, H = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw[m.end():m.end() + W * H], dtype=np.uint8).reshape(H, W)


METRIC_COLUMNS = ("slice", "R", "psnr_db", "ssim")


def write_metrics_csv(path, rows) -> None:
    """``rows`` are (slice, R, psnr_db, ssim) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for s, R, p, q in rows:
            w.writerow([int(s), int(R), repr(float(p)), repr(float(q))])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["slice"]), int(r["R"]), float(r["psnr_db"]), float(r["ssim"]))
                for r in reader]
