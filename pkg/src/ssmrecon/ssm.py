"""Selective state-space scan with zero-order-hold discretisation.

Per channel ``d`` and state ``n`` the recurrence is

    h_t = exp(dt_t A) h_{t-1} + Bbar_t x_t,      y_t = <C_t, h_t> + skip * x_t

with ``A`` diagonal per channel (``A = -exp(A_log)``) and ``B_t``, ``C_t``,
``dt_t`` projected from the input sequence itself.  Two input matrices are
supported: ``"zoh_full"`` (exact ZOH, ``Bbar = expm1(dt A) / A * B``) and
``"euler_b"`` (``Bbar = dt * B``).

The differentiable primitive :func:`scan_core` runs compiled lane kernels;
:func:`scan_reference` is the plain step-by-step loop used as an oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError

MODES = ("zoh_full", "euler_b")


@dataclass
class SSMParams:
    """Selective-scan parameters.

    Shapes are ``A_log (D, N)``, ``W_B, W_C (D, N)``, ``W_dt_down (D, R)``,
    ``W_dt_up (R, D)``, ``b_dt (D,)``, ``skip (D,)``; with per-direction
    weights every field gains a leading axis of length 4.
    """

    A_log: Tensor
    W_B: Tensor
    W_C: Tensor
    W_dt_down: Tensor
    W_dt_up: Tensor
    b_dt: Tensor
    skip: Tensor


def dt_rank_for(dim: int) -> int:
    return max(1, math.ceil(dim / 16))


def init_ssm_params(dim, state_dim, rng, rank=None, directions=None,
                    dt_min=1e-3, dt_max=1e-1) -> SSMParams:
    """Standard stable initialisation: A_dn = -(n+1), softplus(b_dt) in [dt_min, dt_max]."""
    rank = rank or dt_rank_for(dim)
    lead = () if directions is None else (directions,)
    bound = 1.0 / math.sqrt(dim)
    A_log = np.broadcast_to(np.log(np.arange(1, state_dim + 1, dtype=np.float64)),
                            lead + (dim, state_dim)).copy()
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=lead + (dim,)))
    b_dt = dt + np.log(-np.expm1(-dt))  # inverse softplus
    return SSMParams(
        A_log=Tensor(A_log, requires_grad=True),
        W_B=Tensor(rng.uniform(-bound, bound, lead + (dim, state_dim)), requires_grad=True),
        W_C=Tensor(rng.uniform(-bound, bound, lead + (dim, state_dim)), requires_grad=True),
        W_dt_down=Tensor(rng.uniform(-bound, bound, lead + (dim, rank)), requires_grad=True),
        W_dt_up=Tensor(rng.uniform(-rank ** -0.5, rank ** -0.5, lead + (rank, dim)),
                       requires_grad=True),
        b_dt=Tensor(b_dt, requires_grad=True),
        skip=Tensor(np.ones(lead + (dim,)), requires_grad=True),
    )


def zoh_discretize(A, B_t, delta_t, mode="zoh_full"):
    """Discretise one step: returns ``(Abar, Bbar)`` of shape (..., D, N).

    ``A`` is (D, N), ``B_t`` is (..., N) and ``delta_t`` is (..., D).
    """
    A = np.asarray(A, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    B_t = np.asarray(B_t, dtype=np.float64)
    if np.any(delta_t <= 0):
        raise ContractError("zoh_discretize: step sizes must be strictly positive")
    if mode not in MODES:
        raise ConfigError(f"unknown discretisation mode {mode!r}")
    z = delta_t[..., :, None] * A
    Abar = np.exp(z)
    if mode == "zoh_full":
        Bbar = np.expm1(z) / A * B_t[..., None, :]
    else:
        Bbar = delta_t[..., :, None] * B_t[..., None, :]
    return Abar, Bbar


def scan_reference(u, delta, A, Bm, Cm, skip, mode="zoh_full"):
    """Step-by-step oracle.  u, delta: (..., L, D); A: (D, N); Bm, Cm: (..., L, N)."""
    u = np.asarray(u, dtype=np.float64)
    L = u.shape[-2]
    h = np.zeros(u.shape[:-2] + np.shape(A))
    y = np.empty_like(u)
    for t in range(L):
        Abar, Bbar = zoh_discretize(A, Bm[..., t, :], delta[..., t, :], mode)
        h = Abar * h + Bbar * u[..., t, :, None]
        y[..., t, :] = (h * Cm[..., t, None, :]).sum(axis=-1) + skip * u[..., t, :]
    return y


# ---------------------------------------------------------------------------
# Compiled lane kernels.  One lane = one (batch, direction) sequence.
# State-sized arrays use an (N, D) layout so the innermost loop runs over
# channels, which lets the compiler vectorise it.
# ---------------------------------------------------------------------------

_FAST = {"nsz", "contract", "reassoc", "arcp"}


@njit(cache=True, fastmath=_FAST)
def _forward_lane(u, delta, em1, A, invA, Bm, Cm, skip, zoh, y, hbuf):
    # hbuf is (L + 1, N, D) when the trajectory is kept, (2, N, D) otherwise
    L, D = u.shape
    N = A.shape[0]
    keep = hbuf.shape[0] == L + 1
    hbuf[0] = 0.0
    for t in range(L):
        ut = u[t]
        dlt = delta[t]
        yt = y[t]
        for d in range(D):
            yt[d] = skip[d] * ut[d]
        hp = hbuf[t] if keep else hbuf[t % 2]
        hn = hbuf[t + 1] if keep else hbuf[(t + 1) % 2]
        for n in range(N):
            b = Bm[t, n]
            c = Cm[t, n]
            em = em1[t, n]
            iA = invA[n]
            hpn = hp[n]
            hnn = hn[n]
            for d in range(D):
                e = em[d]
                if zoh:
                    bb = e * iA[d] * b
                else:
                    bb = dlt[d] * b
                hv = (e + 1.0) * hpn[d] + bb * ut[d]
                hnn[d] = hv
                yt[d] += c * hv


@njit(cache=True, fastmath=_FAST)
def _forward_lane_chunked(u, delta, em1, A, invA, Bm, Cm, skip, zoh, chunk, y, carry, hl, P):
    # Each chunk is scanned from a zero state while tracking the running decay
    # product; the state entering the chunk is then folded in as P_t * carry.
    L, D = u.shape
    N = A.shape[0]
    carry[:, :] = 0.0
    for start in range(0, L, chunk):
        stop = min(start + chunk, L)
        hl[:, :] = 0.0
        P[:, :] = 1.0
        for t in range(start, stop):
            ut = u[t]
            dlt = delta[t]
            yt = y[t]
            for d in range(D):
                yt[d] = skip[d] * ut[d]
            for n in range(N):
                b = Bm[t, n]
                c = Cm[t, n]
                for d in range(D):
                    e = em1[t, n, d]
                    if zoh:
                        bb = e * invA[n, d] * b
                    else:
                        bb = dlt[d] * b
                    a = e + 1.0
                    hl[n, d] = a * hl[n, d] + bb * ut[d]
                    P[n, d] *= a
                    yt[d] += c * (hl[n, d] + P[n, d] * carry[n, d])
        for n in range(N):
            for d in range(D):
                carry[n, d] = hl[n, d] + P[n, d] * carry[n, d]


@njit(cache=True, fastmath=_FAST)
def _backward_lane(gy, u, delta, em1, A, invA, Bm, Cm, skip, zoh, hbuf, gh,
                   gu, gdelta, gA, gB, gC, gskip):
    # hbuf holds the forward trajectory, hbuf[t + 1] = h_t and hbuf[0] = 0
    L, D = u.shape
    N = A.shape[0]
    gh[:, :] = 0.0
    for t in range(L - 1, -1, -1):
        gyt = gy[t]
        ut = u[t]
        dlt = delta[t]
        gut = gu[t]
        gdt = gdelta[t]
        for d in range(D):
            gskip[d] += gyt[d] * ut[d]
            gut[d] = gyt[d] * skip[d]
            gdt[d] = 0.0
        for n in range(N):
            b = Bm[t, n]
            c = Cm[t, n]
            em = em1[t, n]
            An = A[n]
            iA = invA[n]
            hp = hbuf[t, n]
            hn = hbuf[t + 1, n]
            ghn = gh[n]
            gAn = gA[n]
            sc = 0.0
            sb = 0.0
            for d in range(D):
                g = gyt[d]
                sc += g * hn[d]
                ght = ghn[d] + g * c
                e = em[d]
                a = e + 1.0
                dl = dlt[d]
                g_a = ght * hp[d]
                g_bb = ght * ut[d]
                if zoh:
                    f = e * iA[d]
                    gdt[d] += (g_a * An[d] + g_bb * b) * a
                    gAn[d] += g_a * a * dl + g_bb * b * (dl * a - f) * iA[d]
                else:
                    f = dl
                    gdt[d] += g_a * a * An[d] + g_bb * b
                    gAn[d] += g_a * a * dl
                sb += g_bb * f
                gut[d] += ght * f * b
                ghn[d] = ght * a
            gC[t, n] += sc
            gB[t, n] += sb


def _exponent(delta, A):
    """expm1(delta * A) laid out (Bs, K, L, N, D) for every lane."""
    Bs, K = delta.shape[:2]
    Ka = A.shape[0]
    out = np.empty(delta.shape[:3] + A.shape[1:])
    for k in range(K):
        np.multiply(delta[:, k, :, None, :], A[k if Ka > 1 else 0], out=out[:, k])
    return np.expm1(out, out=out)


def scan_core(u, delta, A, Bm, Cm, skip, mode="zoh_full", chunk=None) -> Tensor:
    """Differentiable selective scan over lanes.

    u, delta: (Bs, K, L, D); A: (Ka, D, N); Bm, Cm: (Bs, K, L, N);
    skip: (Ka, D), where Ka is 1 (weights shared by all K directions) or K.
    ``chunk`` selects the blocked forward evaluation with that block length.
    """
    u, delta, A, Bm, Cm, skip = (ad.as_tensor(v) for v in (u, delta, A, Bm, Cm, skip))
    if mode not in MODES:
        raise ConfigError(f"unknown discretisation mode {mode!r}")
    if u.ndim != 4 or delta.shape != u.shape:
        raise ShapeError(f"scan_core: u {u.shape} / delta {delta.shape}")
    Bs, K, L, D = u.shape
    Ka, _, N = A.shape
    if A.shape[1] != D or Ka not in (1, K) or skip.shape != (Ka, D):
        raise ShapeError(f"scan_core: A {A.shape}, skip {skip.shape} vs u {u.shape}")
    if Bm.shape != (Bs, K, L, N) or Cm.shape != (Bs, K, L, N):
        raise ShapeError(f"scan_core: B {Bm.shape}, C {Cm.shape} expected {(Bs, K, L, N)}")
    if np.any(A.data >= 0):
        raise ContractError("scan_core: A must be strictly negative")
    zoh = mode == "zoh_full"
    ud = np.ascontiguousarray(u.data)
    dd = np.ascontiguousarray(delta.data)
    At = np.ascontiguousarray(A.data.transpose(0, 2, 1))
    iAt = 1.0 / At
    Bd = np.ascontiguousarray(Bm.data)
    Cd = np.ascontiguousarray(Cm.data)
    sd = np.ascontiguousarray(skip.data)

    keep = ad.is_grad_enabled() and any(v.requires_grad for v in (u, delta, A, Bm, Cm, skip))
    em1 = _exponent(dd, At)
    y = np.empty_like(ud)
    traj = np.empty((Bs, K, L + 1, N, D)) if keep else None
    if chunk:
        carry, hl, P = np.empty((N, D)), np.empty((N, D)), np.empty((N, D))
    else:
        h2 = np.empty((2, N, D))
    for b in range(Bs):
        for k in range(K):
            ka = k if Ka > 1 else 0
            lane = (ud[b, k], dd[b, k], em1[b, k], At[ka], iAt[ka], Bd[b, k], Cd[b, k],
                    sd[ka], zoh)
            if chunk and not keep:
                _forward_lane_chunked(*lane, int(chunk), y[b, k], carry, hl, P)
            else:
                _forward_lane(*lane, y[b, k], traj[b, k] if keep else h2)
    if not keep:
        em1 = None

    def rule(g):
        g = np.ascontiguousarray(g)
        gu, gdelta = np.empty_like(ud), np.empty_like(dd)
        gA, gskip = np.zeros_like(At), np.zeros_like(sd)
        gB, gC = np.zeros_like(Bd), np.zeros_like(Cd)
        gh = np.empty((N, D))
        for b in range(Bs):
            for k in range(K):
                ka = k if Ka > 1 else 0
                _backward_lane(g[b, k], ud[b, k], dd[b, k], em1[b, k], At[ka], iAt[ka],
                               Bd[b, k], Cd[b, k], sd[ka], zoh, traj[b, k], gh,
                               gu[b, k], gdelta[b, k], gA[ka], gB[b, k], gC[b, k], gskip[ka])
        return gu, gdelta, gA.transpose(0, 2, 1), gB, gC, gskip

    return Tensor._result(y, (u, delta, A, Bm, Cm, skip), rule, "selective_scan")


def _project(x: Tensor, W: Tensor) -> Tensor:
    if W.ndim == 2:
        return ad.linear(x, W)
    return ad.einsum("bkli,kio->bklo", x, W)


def selective_scan(x, p: SSMParams, mode="zoh_full", chunk=None) -> Tensor:
    """Input-dependent scan of ``x`` with shape (Bs, L, D) or (Bs, K, L, D)."""
    x = ad.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4:
        raise ShapeError(f"selective_scan: expected (Bs, [K,] L, D), got {x.shape}")
    per_dir = p.A_log.ndim == 3
    Bm = _project(x, p.W_B)
    Cm = _project(x, p.W_C)
    b_dt = ad.reshape(p.b_dt, (p.b_dt.shape[0], 1, p.b_dt.shape[1])) if per_dir else p.b_dt
    delta = ad.softplus(ad.add(_project(_project(x, p.W_dt_down), p.W_dt_up), b_dt))
    A = ad.neg(ad.exp(p.A_log))
    skip = p.skip
    if not per_dir:
        A = ad.reshape(A, (1,) + A.shape)
        skip = ad.reshape(skip, (1,) + skip.shape)
    y = scan_core(x, delta, A, Bm, Cm, skip, mode=mode, chunk=chunk)
    if squeeze:
        y = ad.reshape(y, (y.shape[0],) + y.shape[2:])
    return y
