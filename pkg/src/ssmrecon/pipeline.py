"""End-to-end workflows shared by the command line and the test-suite."""
from __future__ import annotations

import warnings
from typing import Iterable, List, Optional

import numpy as np

from . import autodiff as ad
from .baselines import CgConfig, ConvergenceWarning, cg_tikhonov
from .config import RunConfig, parse_config
from .data_consistency import zero_mask_like
from .errors import ConfigError
from .forward_model import encode
from .metrics import effective_receptive_field, magnitude, psnr, ssim
from .network import NetworkConfig, NetworkParams, reconstruct
from .phantoms import SplitData, load_split, read_manifest
from .training import parse_checkpoint, restore

BASELINES = ("zero_filled", "cg")
INFER_CHUNK = 8


def load_checkpoint(path):
    """Returns ``(RunConfig, NetworkConfig, Checkpoint)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    text, entries = parse_checkpoint(buf)
    run = parse_config(text, f"{path}:config")
    net = run.network()
    return run, net, restore(text, entries, net)


def dataset_rates(root) -> List[int]:
    return [int(r) for r in read_manifest(root)["R"].split(",")]


def load_training_data(root, rates: Iterable[int]) -> SplitData:
    """Training split, all requested rates stacked into one pool."""
    parts = [load_split(root, "train", R) for R in rates]
    if len(parts) == 1:
        return parts[0]
    return SplitData(np.concatenate([p.indices for p in parts]), parts[0].R,
                     *(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("x_fs", "x_us", "masks", "coils")))


def network_recon(data: SplitData, params: NetworkParams, net: NetworkConfig) -> np.ndarray:
    """(S, H, W, 2) reconstructions, evaluated in fixed-size chunks."""
    out = np.empty_like(data.x_us)
    with ad.no_grad():
        for s in range(0, len(data), INFER_CHUNK):
            sl = slice(s, s + INFER_CHUNK)
            out[sl] = reconstruct(data.x_us[sl], data.masks[sl], data.coils[sl], params, net).data
    return out


def baseline_recon(data: SplitData, method: str, cg: Optional[CgConfig] = None) -> np.ndarray:
    if method == "zero_filled":
        return data.x_us.copy()
    if method != "cg":
        raise ConfigError(f"unknown baseline {method!r}; choose from {BASELINES}")
    out = np.empty_like(data.x_us)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for i in range(len(data)):
            with ad.no_grad():
                y = encode(data.x_fs[i], data.coils[i], data.masks[i]).data
            out[i] = cg_tikhonov(y, data.coils[i], data.masks[i], cg).x
    return out


def score(data: SplitData, recon: np.ndarray):
    """Rows (slice, R, psnr_db, ssim) computed on magnitude images."""
    rows = []
    for i, idx in enumerate(data.indices):
        ref = magnitude(data.x_fs[i])
        rec = magnitude(recon[i])
        rows.append((int(idx), data.R, psnr(rec, ref), ssim(rec, ref)))
    return rows


def cg_config(run: RunConfig) -> CgConfig:
    return CgConfig(lam=run.cg_lambda, max_iters=run.cg_iters, tol=run.cg_tol)


def evaluate(root, split, rates, params=None, net=None, baseline=None, run=None):
    """Metric rows for a trained network or a named baseline over all rates."""
    rows = []
    for R in rates:
        data = load_split(root, split, R)
        if baseline is not None:
            recon = baseline_recon(data, baseline, cg_config(run or RunConfig()))
        else:
            recon = network_recon(data, params, net)
        rows += score(data, recon)
    return rows


def network_erf(data: SplitData, params: NetworkParams, net: NetworkConfig,
                count: Optional[int] = None) -> np.ndarray:
    """ERF of the centre output pixel with an all-zero mask inside the network."""
    n = len(data) if count is None else min(count, len(data))
    zero = zero_mask_like(data.masks[0])

    def model_fn(x, k):
        return reconstruct(x, zero, data.coils[k], params, net)

    return effective_receptive_field(model_fn, data.x_us[:n])
