"""Synthetic head-like phantoms and paired under/fully-sampled datasets.

Dataset directory layout::

    <root>/dataset.cfg                     generation parameters
    <root>/<split>/<index>.xfs.mrtn        fully sampled image   (H, W, 2)
    <root>/<split>/<index>.coils.mrtn      coil maps             (Nc, H, W, 2)
    <root>/<split>/<index>-R<R>.mask.mrtn  sampling mask         (H, W)
    <root>/<split>/<index>-R<R>.xus.mrtn   zero-filled image     (H, W, 2)

Slice indices are global and disjoint between splits (train first, then
val, then test), so no phantom appears in two splits.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError
from .forward_model import (DEFAULT_CALIB, complex_image, encode, generate_coil_maps,
                            generate_gaussian_mask, zero_filled)
from .tensorfile import load_tensor, save_tensor

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    ellipses_min: int = 4
    ellipses_max: int = 10
    intensity_min: float = 0.05
    intensity_max: float = 0.9
    phase_scale: float = 0.5   # shortest phase wavelength, as a fraction of the field of view
    phase_amplitude: float = 1.0  # peak phase excursion in radians
    seed: int = 0

    def validate(self):
        if self.size < 8:
            raise ConfigError(f"phantom size must be >= 8, got {self.size}")
        if not 0 <= self.ellipses_min <= self.ellipses_max:
            raise ConfigError("need 0 <= ellipses_min <= ellipses_max")
        if not 0.0 <= self.intensity_min <= self.intensity_max <= 1.0:
            raise ConfigError("need 0 <= intensity_min <= intensity_max <= 1")
        if self.phase_scale <= 0:
            raise ConfigError("phase_scale must be positive")
        return self


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, index: int) -> np.ndarray:
    """Complex (size, size) phantom, deterministic in ``(spec.seed, index)``.

    A bright elliptical rim encloses a darker parenchyma into which
    randomly placed, rotated ellipses are painted with constant intensities.
    The magnitude is clamped to [0, 1] and multiplied by a smooth phase map
    built from a few low-frequency plane waves.
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    yy, xx = np.meshgrid(np.linspace(-1, 1, n, endpoint=False) + 1.0 / n,
                         np.linspace(-1, 1, n, endpoint=False) + 1.0 / n, indexing="ij")

    mag = np.zeros((n, n))
    ay, ax = rng.uniform(0.78, 0.9), rng.uniform(0.62, 0.75)
    tilt = rng.uniform(-0.15, 0.15)
    head = _ellipse(yy, xx, 0.0, 0.0, ay, ax, tilt)
    mag[head] = rng.uniform(0.8, 1.0)
    brain = _ellipse(yy, xx, 0.0, 0.0, 0.88 * ay, 0.86 * ax, tilt)
    mag[brain] = rng.uniform(0.2, 0.4)

    for _ in range(int(rng.integers(spec.ellipses_min, spec.ellipses_max + 1))):
        # centres inside the parenchyma, sizes between 5% and 35% of it
        r, phi = 0.6 * math.sqrt(rng.uniform()), rng.uniform(0, 2 * math.pi)
        cy, cx = r * ay * math.sin(phi), r * ax * math.cos(phi)
        ey, ex = rng.uniform(0.05, 0.35, size=2) * np.array([ay, ax])
        region = _ellipse(yy, xx, cy, cx, ey, ex, rng.uniform(0, math.pi)) & brain
        mag[region] = rng.uniform(spec.intensity_min, spec.intensity_max)
    mag = np.clip(mag, 0.0, 1.0)

    phase = np.zeros((n, n))
    fmax = 1.0 / spec.phase_scale
    for _ in range(3):
        fy, fx = rng.uniform(-fmax, fmax, size=2) / 2.0  # cycles per unit length
        phase += np.cos(2 * math.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * math.pi))
    phase *= spec.phase_amplitude / 3.0
    return mag * np.exp(1j * phase)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

def _split_ranges(n_train, n_val, n_test):
    bounds = np.cumsum([0, n_train, n_val, n_test])
    return {s: range(int(bounds[i]), int(bounds[i + 1])) for i, s in enumerate(SPLITS)}


def slice_mask(size, R, mask_seed, index, calib=DEFAULT_CALIB):
    return generate_gaussian_mask(size, size, R, calib=calib, seed=[mask_seed, index, int(R)])


def make_dataset(root, spec: PhantomSpec, n_train: int, n_val: int, n_test: int,
                 R_list: Sequence[int], mask_seed: int = 0, ncoils: int = 1,
                 calib: int = DEFAULT_CALIB) -> dict:
    """Write every split to ``root``; returns ``{split: [indices]}``."""
    spec.validate()
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("every split needs at least one slice")
    if not R_list:
        raise ConfigError("at least one acceleration rate is required")
    ranges = _split_ranges(n_train, n_val, n_test)
    n = spec.size
    os.makedirs(root, exist_ok=True)
    for split, idx in ranges.items():
        d = os.path.join(root, split)
        os.makedirs(d, exist_ok=True)
        for i in idx:
            x = complex_image(generate_phantom(spec, i))
            C = generate_coil_maps(n, n, ncoils, seed=[spec.seed, 1, i])
            save_tensor(os.path.join(d, f"{i:04d}.xfs.mrtn"), x)
            save_tensor(os.path.join(d, f"{i:04d}.coils.mrtn"), complex_image(C))
            for R in R_list:
                mask = slice_mask(n, R, mask_seed, i, calib)
                with ad.no_grad():
                    x_us = zero_filled(encode(x, C, mask.grid), C, mask.grid).data
                save_tensor(os.path.join(d, f"{i:04d}-R{R}.mask.mrtn"), mask.grid)
                save_tensor(os.path.join(d, f"{i:04d}-R{R}.xus.mrtn"), x_us)
    manifest = {
        "size": n, "ellipses_min": spec.ellipses_min, "ellipses_max": spec.ellipses_max,
        "intensity_min": spec.intensity_min, "intensity_max": spec.intensity_max,
        "phase_scale": spec.phase_scale, "phase_amplitude": spec.phase_amplitude,
        "seed": spec.seed, "n_train": n_train, "n_val": n_val, "n_test": n_test,
        "R": ",".join(str(r) for r in R_list), "mask_seed": mask_seed,
        "ncoils": ncoils, "calib": calib,
    }
    with open(os.path.join(root, "dataset.cfg"), "w") as fh:
        for k, v in manifest.items():
            fh.write(f"{k} = {v}\n")
    return {s: list(r) for s, r in ranges.items()}


def read_manifest(root) -> dict:
    path = os.path.join(root, "dataset.cfg")
    if not os.path.exists(path):
        raise FormatError(f"{path}: dataset manifest not found")
    out = {}
    with open(path) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            if key.strip():
                out[key.strip()] = value.strip()
    return out


@dataclass
class SplitData:
    """One split at one acceleration rate, stacked along a leading slice axis."""

    indices: np.ndarray
    R: int
    x_fs: np.ndarray   # (S, H, W, 2)
    x_us: np.ndarray   # (S, H, W, 2)
    masks: np.ndarray  # (S, H, W)
    coils: np.ndarray  # (S, Nc, H, W) complex

    def __len__(self):
        return len(self.indices)


def load_split(root, split: str, R: int) -> SplitData:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    man = read_manifest(root)
    ranges = _split_ranges(int(man["n_train"]), int(man["n_val"]), int(man["n_test"]))
    if str(R) not in man["R"].split(","):
        raise ConfigError(f"dataset has no R={R} (available: {man['R']})")
    d = os.path.join(root, split)
    idx = np.array(list(ranges[split]))
    x_fs, x_us, masks, coils = [], [], [], []
    for i in idx:
        x_fs.append(load_tensor(os.path.join(d, f"{i:04d}.xfs.mrtn")))
        c = load_tensor(os.path.join(d, f"{i:04d}.coils.mrtn"))
        coils.append(c[..., 0] + 1j * c[..., 1])
        masks.append(load_tensor(os.path.join(d, f"{i:04d}-R{R}.mask.mrtn")))
        x_us.append(load_tensor(os.path.join(d, f"{i:04d}-R{R}.xus.mrtn")))
    return SplitData(idx, int(R), np.stack(x_fs), np.stack(x_us), np.stack(masks),
                     np.stack(coils))
