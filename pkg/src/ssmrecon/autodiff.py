"""Dense float64 arrays with define-by-run reverse-mode differentiation.

Each differentiable primitive produces a :class:`Tensor` that remembers its
parents and a backward rule mapping the upstream gradient to one gradient per
parent.  :func:`backward` walks the recorded graph in reverse topological
order and accumulates gradients additively at fan-out points.

Complex images are carried as real tensors whose trailing axis has length 2
(real, imaginary).  Operations that need complex arithmetic convert at the
boundary with :func:`to_complex` / :func:`to_real`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DTYPE = np.float64

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for reverse mode.

    ``parents`` and ``backward_rule`` are only populated when at least one
    input requires a gradient and recording is enabled.  ``op`` names the
    producing primitive (``"leaf"`` for user-created tensors).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_rule", "op", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_rule = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data, parents, rule, op):
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.parents = tuple(parents) if track else ()
        out.backward_rule = rule if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _binary_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)

    def rule(g):
        return sum_to_shape(g, a.shape), sum_to_shape(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)

    def rule(g):
        return sum_to_shape(g, a.shape), sum_to_shape(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)

    def rule(g):
        return sum_to_shape(g * b.data, a.shape), sum_to_shape(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b)

    def rule(g):
        ga = g / b.data
        return sum_to_shape(ga, a.shape), sum_to_shape(-ga * a.data / b.data, b.shape)

    return Tensor._result(a.data / b.data, (a, b), rule, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


def tabs(x) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    x = as_tensor(x)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return Tensor._result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def rule(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return Tensor._result(x.data * s, (x,), rule, "silu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(np.logaddexp(0.0, x.data), (x,),
                          lambda g: (g * _sigmoid(x.data),), "softplus")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return Tensor._result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._result(y, (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    y = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return Tensor._result(y, (x,), lambda g: (sum_to_shape(g, x.shape),), "broadcast")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    y = np.array(x.data[index], dtype=DTYPE)

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(y, (x,), rule, "getitem")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=DTYPE)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(y, (x,), rule, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def linear(x, W, b=None) -> Tensor:
    """y = x @ W + b over the last axis of ``x``.

    W has shape (Din, Dout); b, if given, has shape (Dout,).
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
    din, dout = W.shape

    def rule(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ W.data.T).reshape(x.shape)
        gW = x.data.reshape(-1, din).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return Tensor._result(y, parents, rule, "linear")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with an explicit output (``"ij,jk->ik"``).

    Every index of an operand must appear in the other operand or in the
    output, so each adjoint is again a two-operand einsum.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if any(c not in other and c not in out for c in own):
            raise ContractError(f"einsum {subscripts!r}: operand-only index not supported")
    try:
        y = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: {exc}") from exc

    def rule(g):
        return (np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True),
                np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True))

    return Tensor._result(np.asarray(y, dtype=DTYPE), (a, b), rule, "einsum")


# ---------------------------------------------------------------------------
# Normalisation and convolution
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs D={D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def rule(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(y, (x, gamma, beta), rule, "layer_norm")


def depthwise_conv2d(x, k) -> Tensor:
    """Per-channel 2D cross-correlation with zero padding ("same" output).

    x: (..., H, W, D); k: (kh, kw, D) with odd kh, kw.
    """
    x, k = as_tensor(x), as_tensor(k)
    if k.ndim != 3 or x.ndim < 3 or k.shape[2] != x.shape[-1]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} vs kernel {k.shape}")
    kh, kw, _ = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel extents must be odd, got {kh}x{kw}")
    H, W = x.shape[-3], x.shape[-2]
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.data, pad)
    y = np.zeros_like(x.data)
    for a in range(kh):
        for b in range(kw):
            y += xp[..., a:a + H, b:b + W, :] * k.data[a, b]

    def rule(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k.data)
        lead = tuple(range(x.ndim - 1))
        for a in range(kh):
            for b in range(kw):
                gxp[..., a:a + H, b:b + W, :] += g * k.data[a, b]
                gk[a, b] = (xp[..., a:a + H, b:b + W, :] * g).sum(axis=lead)
        return gxp[..., ph:ph + H, pw:pw + W, :], gk

    return Tensor._result(y, (x, k), rule, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# Complex helpers on the (..., 2) representation
# ---------------------------------------------------------------------------

def to_complex(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    return arr.view(np.complex128)[..., 0]


def to_real(carr: np.ndarray) -> np.ndarray:
    carr = np.ascontiguousarray(carr, dtype=np.complex128)
    return carr[..., None].view(DTYPE)


def cmul(x, c: np.ndarray) -> Tensor:
    """Multiply a 2-channel complex tensor by a constant complex array.

    Broadcasting follows numpy on the complex shapes.  The adjoint multiplies
    by ``conj(c)``.
    """
    x = as_tensor(x)
    xc = to_complex(x.data)
    try:
        yc = xc * c
    except ValueError as exc:
        raise ShapeError(f"cmul: {xc.shape} vs {np.shape(c)}") from exc
    cshape = xc.shape

    def rule(g):
        gc = sum_to_shape(to_complex(g) * np.conj(c), cshape)
        return (to_real(gc),)

    return Tensor._result(to_real(yc), (x,), rule, "cmul")


def complex_abs(x) -> Tensor:
    """Pixelwise magnitude of a (..., 2) tensor; gradient 0 where the magnitude is 0."""
    x = as_tensor(x)
    mag = np.sqrt(x.data[..., 0] ** 2 + x.data[..., 1] ** 2)

    def rule(g):
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g / safe, 0.0)
        return (x.data * scale[..., None],)

    return Tensor._result(mag, (x,), rule, "complex_abs")


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------

def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Back-propagate from a scalar ``loss``.

    Returns ``{leaf: gradient ndarray}`` for every leaf with
    ``requires_grad``; the same arrays are stored on ``leaf.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE)
    out = {}
    for node, g in leaves.values():
        node.grad = g
        out[node] = g
    return out


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h=1e-5,
              max_per_tensor=None, rng=None, floor=1e-6):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and must read the current contents of
    ``tensors``.  Returns the largest entrywise relative error
    ``|a - n| / max(|a|, |n|, floor)`` over the checked entries.
    """
    for t in tensors:
        t.requires_grad = True
    loss = fn()
    grads = backward(loss)
    analytic = [grads.get(t, np.zeros_like(t.data)) for t in tensors]
    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                rng = rng or np.random.default_rng(0)
                idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
            af = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
