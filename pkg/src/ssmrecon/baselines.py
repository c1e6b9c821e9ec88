"""Classical reference reconstructions: zero-filled and Tikhonov-regularised CG."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .autodiff import to_complex, to_real
from .errors import ConfigError, ShapeError
from .fourier import fft2c_np, ifft2c_np


class ConvergenceWarning(UserWarning):
    """CG stopped at ``max_iters`` before reaching the residual tolerance."""


@dataclass
class CgConfig:
    lam: float = 0.01
    max_iters: int = 100
    tol: float = 1e-10  # relative to ||E^H y||
    method: str = "cr"

    def validate(self):
        if self.lam < 0 or self.max_iters < 1 or self.tol < 0:
            raise ConfigError("CG needs lam >= 0, max_iters >= 1, tol >= 0")
        if self.method not in SOLVERS:
            raise ConfigError(f"method must be one of {sorted(SOLVERS)}, got {self.method!r}")
        return self


@dataclass
class CgResult:
    x: np.ndarray                 # (H, W, 2)
    residuals: List[float] = field(default_factory=list)  # ||b - A x_k||, k = 0, 1, ...
    converged: bool = False
    iters: int = 0


def _coils_and_mask(C, M, shape):
    C = np.asarray(C)
    if C.ndim == 2:
        C = C[None]
    M = np.asarray(getattr(M, "grid", M), dtype=np.float64)
    if C.shape[-2:] != shape or M.shape != shape:
        raise ShapeError(f"coil maps {C.shape} / mask {M.shape} do not match image {shape}")
    return C, M


def normal_operator(C, M, lam):
    """x -> (E^H E + lam I) x on complex (H, W) images."""
    def apply(x):
        return (np.conj(C) * ifft2c_np(M * fft2c_np(C * x))).sum(axis=0) + lam * x
    return apply


def adjoint(y, C, M):
    """E^H y = sum_c conj(C_c) ifft2c(M y_c) on complex arrays."""
    return (np.conj(C) * ifft2c_np(M * y)).sum(axis=0)


def _cg(A, b, x, cfg, res):
    r = b - A(x)
    p = r.copy()
    rs = np.vdot(r, r).real
    while len(res) <= cfg.max_iters:
        Ap = A(p)
        denom = np.vdot(p, Ap).real
        if denom <= 0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = np.vdot(r, r).real
        res.append(float(np.sqrt(rs_new)))
        yield x
        p = r + (rs_new / rs) * p
        rs = rs_new


def _cr(A, b, x, cfg, res):
    # conjugate residuals: minimises ||b - A x|| over the Krylov space, so the
    # residual norm cannot increase for Hermitian positive definite A
    r = b - A(x)
    Ar = A(r)
    p, Ap = r.copy(), Ar.copy()
    rAr = np.vdot(r, Ar).real
    while len(res) <= cfg.max_iters:
        denom = np.vdot(Ap, Ap).real
        if denom <= 0 or rAr <= 0:
            break
        alpha = rAr / denom
        x = x + alpha * p
        r = r - alpha * Ap
        res.append(float(np.linalg.norm(r)))
        yield x
        Ar = A(r)
        rAr_new = np.vdot(r, Ar).real
        beta = rAr_new / rAr
        p = r + beta * p
        Ap = Ar + beta * Ap
        rAr = rAr_new


SOLVERS = {"cr": _cr, "cg": _cg}


def cg_tikhonov(y, C, M, cfg: CgConfig = None) -> CgResult:
    """Solve (E^H E + lam I) x = E^H y by a conjugate-direction Krylov method.

    ``y`` is per-coil k-space (Nc, H, W, 2).  ``cfg.method`` picks conjugate
    residuals ("cr", residual norm nonincreasing) or plain conjugate
    gradients ("cg").  If the relative residual has not dropped below
    ``cfg.tol`` after ``cfg.max_iters`` steps a :class:`ConvergenceWarning` is
    issued and the iterate with the smallest residual is returned.
    """
    cfg = (cfg or CgConfig()).validate()
    yc = to_complex(np.asarray(y, dtype=np.float64))
    C, M = _coils_and_mask(C, M, yc.shape[-2:])
    if yc.shape[0] != C.shape[0]:
        raise ShapeError(f"k-space has {yc.shape[0]} coils, maps have {C.shape[0]}")
    A = normal_operator(C, M, cfg.lam)
    b = adjoint(yc, C, M)
    target = cfg.tol * np.linalg.norm(b)
    x = np.zeros_like(b)
    res = [float(np.linalg.norm(b))]
    best_x, best_res = x, res[0]
    converged = res[0] <= target
    if not converged:
        for x in SOLVERS[cfg.method](A, b, x, cfg, res):
            if res[-1] < best_res:
                best_x, best_res = x, res[-1]
            if res[-1] <= target:
                converged = True
                break
    if not converged:
        rel = best_res / max(res[0], 1e-300)
        warnings.warn(f"{cfg.method} did not reach tol {cfg.tol} in {len(res) - 1} iterations "
                      f"(relative residual {rel:.3e})", ConvergenceWarning, stacklevel=2)
    return CgResult(to_real(best_x), res, converged, len(res) - 1)
