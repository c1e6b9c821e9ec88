"""L1 training with AdamW, warm-up plus half-cycle cosine schedule, checkpoints.

Checkpoint layout (``.mrck``)::

    b"MRCK" | u32 version | u32 n | n bytes UTF-8 run config (key = value)
    u32 entry count | entries

    entry = u32 name length | UTF-8 name | one MRTN tensor blob

Entry names are ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>``,
``meta/step`` and ``meta/loss``.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, FormatError, ShapeError, TrainingError
from .network import NetworkConfig, NetworkParams, build, named_tensors, reconstruct
from .tensorfile import decode_tensor, encode_tensor

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    iters: int = 2000
    batch: int = 4
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_iters: int = -1  # negative -> 5% of iters
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 0

    @property
    def warmup(self) -> int:
        return int(round(0.05 * self.iters)) if self.warmup_iters < 0 else self.warmup_iters

    def validate(self):
        if self.iters < 0 or self.batch < 1:
            raise ConfigError("iters must be >= 0 and batch >= 1")
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError(f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.iters and self.warmup >= self.iters:
            raise ConfigError(f"warmup_iters {self.warmup} must be < iters {self.iters}")
        if self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("weight_decay must be >= 0 and betas in [0, 1)")
        return self


def l1_loss(x_r, x_fs) -> Tensor:
    """Mean absolute difference over both real and imaginary channels."""
    x_r, x_fs = ad.as_tensor(x_r), ad.as_tensor(x_fs)
    if x_r.shape != x_fs.shape:
        raise ShapeError(f"l1_loss: {x_r.shape} vs {x_fs.shape}")
    return ad.mean(ad.tabs(ad.sub(x_r, x_fs)))


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to lr_max, then half-cycle cosine down to lr_min at ``iters``."""
    if not 0 <= step <= cfg.iters:
        raise ContractError(f"step {step} outside [0, {cfg.iters}]")
    w = cfg.warmup
    if step < w:
        return cfg.lr_max * step / w
    span = cfg.iters - w
    if span == 0:
        return cfg.lr_max
    frac = (step - w) / span
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, named):
        return cls({k: np.zeros_like(t.data) for k, t in named},
                   {k: np.zeros_like(t.data) for k, t in named}, 0)


def adamw_step(named, grads, state: OptimState, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.01):
    """One in-place AdamW update of every ``(name, Tensor)`` in ``named``.

    theta <- theta * (1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps).
    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in named:
        g = grads.get(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        v *= beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * g * g
        p.data *= 1.0 - lr * wd
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config_text: str
    params: NetworkParams
    optim: OptimState
    step: int
    loss: float


def _pack_entry(name: str, arr) -> bytes:
    raw = name.encode()
    return struct.pack("<I", len(raw)) + raw + encode_tensor(arr)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    named = named_tensors(ck.params)
    entries = [_pack_entry(f"param/{k}", t.data) for k, t in named]
    entries += [_pack_entry(f"adam_m/{k}", ck.optim.m[k]) for k, _ in named]
    entries += [_pack_entry(f"adam_v/{k}", ck.optim.v[k]) for k, _ in named]
    entries.append(_pack_entry("meta/step", np.array([ck.step, ck.optim.step], dtype=float)))
    entries.append(_pack_entry("meta/loss", np.array([ck.loss])))
    cfg = ck.config_text.encode()
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg
    return head + struct.pack("<I", len(entries)) + b"".join(entries)


def save_checkpoint(path, ck: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(ck))
    os.replace(tmp, path)


def _read_u32(buf, pos, what):
    if len(buf) - pos < 4:
        raise FormatError(f"truncated checkpoint ({what})", pos)
    return struct.unpack_from("<I", buf, pos)[0], pos + 4


def parse_checkpoint(buf: bytes):
    """Return ``(config_text, {entry name: array})``."""
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    version, pos = _read_u32(buf, 4, "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    n, pos = _read_u32(buf, pos, "config length")
    if len(buf) - pos < n:
        raise FormatError("truncated config block", pos)
    config_text = bytes(buf[pos:pos + n]).decode()
    pos += n
    count, pos = _read_u32(buf, pos, "entry count")
    entries = {}
    for _ in range(count):
        ln, pos = _read_u32(buf, pos, "entry name length")
        if len(buf) - pos < ln:
            raise FormatError("truncated entry name", pos)
        name = bytes(buf[pos:pos + ln]).decode()
        arr, pos = decode_tensor(buf, pos + ln)
        entries[name] = arr
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return config_text, entries


def restore(config_text: str, entries: dict, net_cfg: NetworkConfig) -> Checkpoint:
    """Rebuild a :class:`Checkpoint` whose tensors come from ``entries``."""
    params = build(net_cfg, seed=0)
    named = named_tensors(params)
    optim = OptimState()
    for k, t in named:
        for prefix in ("param", "adam_m", "adam_v"):
            key = f"{prefix}/{k}"
            if key not in entries:
                raise FormatError(f"checkpoint is missing {key}")
            if entries[key].shape != t.shape:
                raise FormatError(f"{key}: shape {entries[key].shape} != expected {t.shape}")
        t.data[...] = entries[f"param/{k}"]
        optim.m[k] = entries[f"adam_m/{k}"].copy()
        optim.v[k] = entries[f"adam_v/{k}"].copy()
    step, optim_step = (int(s) for s in entries["meta/step"])
    optim.step = optim_step
    return Checkpoint(config_text, params, optim, step, float(entries["meta/loss"][0]))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Uniform sampling with replacement, a pure function of (seed, step)."""
    return np.random.default_rng([seed, step]).integers(0, n, size=batch)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: List[tuple]


def train(data, net_cfg: NetworkConfig, cfg: TrainConfig, config_text: str = "",
          resume: Optional[Checkpoint] = None, log_path=None, ckpt_path=None,
          stop_at: Optional[int] = None) -> TrainResult:
    """Minimise the L1 image loss over ``data`` (a :class:`SplitData`).

    ``stop_at`` ends the run early after that many updates (the schedule still
    spans ``cfg.iters``); together with ``resume`` it allows interrupted runs
    that reproduce an uninterrupted one exactly.
    """
    cfg.validate()
    net_cfg.validate()
    if len(data) == 0:
        raise ConfigError("training set is empty")
    if resume is None:
        params = build(net_cfg, seed=cfg.seed)
        named = named_tensors(params)
        state = OptimState.zeros_like(named)
        start, loss_val = 0, float("nan")
    else:
        params, state = resume.params, resume.optim
        named = named_tensors(params)
        start, loss_val = resume.step, resume.loss
    end = cfg.iters if stop_at is None else min(stop_at, cfg.iters)

    log = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w")
        if resume is None:
            log_fh.write("step,lr,loss\n")
    try:
        for step in range(start + 1, end + 1):
            idx = batch_indices(cfg.seed, step, len(data), cfg.batch)
            x_r = reconstruct(data.x_us[idx], data.masks[idx], data.coils[idx], params, net_cfg)
            loss = l1_loss(x_r, data.x_fs[idx])
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingError(f"non-finite loss {loss_val} at step {step}")
            grads = ad.backward(loss)
            lr = lr_schedule(step, cfg)
            adamw_step(named, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            if step % cfg.log_every == 0:
                log.append((step, lr, loss_val))
                if log_fh is not None:
                    log_fh.write(f"{step},{lr!r},{loss_val!r}\n")
                    log_fh.flush()
            if ckpt_path and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                save_checkpoint(ckpt_path, Checkpoint(config_text, params, state, step, loss_val))
    finally:
        if log_fh is not None:
            log_fh.close()
    ck = Checkpoint(config_text, params, state, max(end, start), loss_val)
    if ckpt_path:
        save_checkpoint(ckpt_path, ck)
    return TrainResult(ck, log)
