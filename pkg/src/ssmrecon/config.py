"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys, repeated keys and unparsable values are rejected with a
:class:`ConfigError` naming the line.

Keys (defaults in brackets):

network   depth [3] dim [32] state_dim [16] patch [2] variant [mamba]
          bbar_mode [zoh_full] expand [1] per_direction [false] mlp_ratio [0]
          conv_kernel [3] dt_rank [0 = ceil(inner/16)]
training  iters [2000] batch [4] lr_max [1e-3] lr_min [1e-6] warmup_iters [-1 = 5%]
          weight_decay [0.01] beta1 [0.9] beta2 [0.999] eps [1e-8] log_every [1]
          ckpt_every [0]
data      size [64] n_train [64] n_val [8] n_test [16] R [4] (comma list)
          mask_seed [0] ncoils [1] calib [8] ellipses_min [4] ellipses_max [10]
          intensity_min [0.05] intensity_max [0.9] phase_scale [0.5]
          phase_amplitude [1.0]
evaluation cg_lambda [0.01] cg_iters [100] cg_tol [1e-6]
common    seed [0] (phantoms, coil maps, initialisation and batch order)
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Tuple

from .errors import ConfigError
from .network import NetworkConfig
from .phantoms import PhantomSpec
from .training import TrainConfig


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    vals = tuple(int(v) for v in text.split(",") if v.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


@dataclass
class RunConfig:
    depth: int = 3
    dim: int = 32
    state_dim: int = 16
    patch: int = 2
    variant: str = "mamba"
    bbar_mode: str = "zoh_full"
    expand: int = 1
    per_direction: bool = False
    mlp_ratio: float = 0.0
    conv_kernel: int = 3
    dt_rank: int = 0
    iters: int = 2000
    batch: int = 4
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    warmup_iters: int = -1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 1
    ckpt_every: int = 0
    size: int = 64
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16
    R: Tuple[int, ...] = (4,)
    mask_seed: int = 0
    ncoils: int = 1
    calib: int = 8
    ellipses_min: int = 4
    ellipses_max: int = 10
    intensity_min: float = 0.05
    intensity_max: float = 0.9
    phase_scale: float = 0.5
    phase_amplitude: float = 1.0
    cg_lambda: float = 0.01
    cg_iters: int = 100
    cg_tol: float = 1e-6
    seed: int = 0

    def network(self, **overrides) -> NetworkConfig:
        kw = dict(depth=self.depth, dim=self.dim, state_dim=self.state_dim, patch=self.patch,
                  height=self.size, width=self.size, ncoils=self.ncoils, variant=self.variant,
                  bbar_mode=self.bbar_mode, expand=self.expand,
                  per_direction=self.per_direction, mlp_ratio=self.mlp_ratio,
                  conv_kernel=self.conv_kernel, dt_rank=self.dt_rank)
        kw.update(overrides)
        return NetworkConfig(**kw).validate()

    def training(self) -> TrainConfig:
        return TrainConfig(iters=self.iters, batch=self.batch, lr_max=self.lr_max,
                           lr_min=self.lr_min, warmup_iters=self.warmup_iters,
                           weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2,
                           eps=self.eps, seed=self.seed, log_every=self.log_every,
                           ckpt_every=self.ckpt_every).validate()

    def phantom(self) -> PhantomSpec:
        return PhantomSpec(size=self.size, ellipses_min=self.ellipses_min,
                           ellipses_max=self.ellipses_max, intensity_min=self.intensity_min,
                           intensity_max=self.intensity_max, phase_scale=self.phase_scale,
                           phase_amplitude=self.phase_amplitude, seed=self.seed).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parser_for(f):
    default = f.default
    if isinstance(default, bool):
        return _bool
    if isinstance(default, tuple):
        return _int_list
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


_PARSERS = {f.name: _parser_for(f) for f in fields(RunConfig)}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key not in _PARSERS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
