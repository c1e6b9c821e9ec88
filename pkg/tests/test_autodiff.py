import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmrecon import autodiff as ad
from ssmrecon.autodiff import Tensor
from ssmrecon.errors import ConfigError, ContractError, ShapeError

# ---------------------------------------------------------------------------
# Worked values
# ---------------------------------------------------------------------------


def test_silu_values_and_slope():
    assert ad.silu(Tensor([0.0])).data[0] == 0.0
    assert ad.silu(Tensor([10.0])).data[0] == pytest.approx(10.0 / (1.0 + np.exp(-10.0)), rel=1e-15)
    assert ad.silu(Tensor([10.0])).data[0] == pytest.approx(9.99955, abs=5e-6)
    x = Tensor([0.0], requires_grad=True)
    g = ad.backward(ad.tsum(ad.silu(x)))
    assert g[x][0] == pytest.approx(0.5, abs=1e-15)


def test_silu_large_negative_is_finite():
    y = ad.silu(Tensor([-800.0, 800.0]))
    assert np.all(np.isfinite(y.data))
    assert y.data[1] == 800.0


def test_linear_examples():
    x = np.random.default_rng(0).standard_normal((3, 2))
    assert np.array_equal(ad.linear(x, np.eye(2), np.zeros(2)).data, x)
    out = ad.linear(np.array([[5.0, -7.0]]), np.zeros((2, 2)), np.array([1.0, 2.0]))
    assert out.data.tolist() == [[1.0, 2.0]]
    out = ad.linear(np.array([1.0, 2.0]), np.array([[1.0, 0.0], [0.0, 3.0]]))
    assert out.data.tolist() == [1.0, 6.0]


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.linear(np.ones((2, 3)), np.ones((2, 2)))


def _conv_oracle(x, k):
    H, W, D = x.shape
    kh, kw, _ = k.shape
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            for d in range(D):
                s = 0.0
                for a in range(kh):
                    for b in range(kw):
                        ii, jj = i + a - kh // 2, j + b - kw // 2
                        if 0 <= ii < H and 0 <= jj < W:
                            s += x[ii, jj, d] * k[a, b, d]
                out[i, j, d] = s
    return out


def test_depthwise_conv_examples(rng):
    x = rng.standard_normal((5, 5, 3))
    assert np.array_equal(ad.depthwise_conv2d(x, np.ones((1, 1, 3))).data, x)
    assert not ad.depthwise_conv2d(x, np.zeros((3, 3, 3))).data.any()
    k = rng.standard_normal((3, 3, 3))
    assert np.abs(ad.depthwise_conv2d(x, k).data - _conv_oracle(x, k)).max() < 1e-12
    k = rng.standard_normal((3, 5, 3))
    assert np.abs(ad.depthwise_conv2d(x, k).data - _conv_oracle(x, k)).max() < 1e-12


def test_depthwise_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ad.depthwise_conv2d(np.ones((4, 4, 1)), np.ones((2, 2, 1)))


def test_layer_norm_examples(rng):
    out = ad.layer_norm(np.full((2, 4), 3.0), np.ones(4), np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.allclose(out.data, [[1, 2, 3, 4]] * 2, atol=0, rtol=0)
    x = rng.standard_normal((6, 8)) * 3 + 1
    y = ad.layer_norm(x, np.ones(8), np.zeros(8), eps=0.0).data
    assert np.abs(y.mean(-1)).max() < 1e-10
    assert np.abs(y.var(-1) - 1).max() < 1e-10
    v = np.array([1.0, 2.0, 4.0, 7.0])
    mu = 3.5
    var = ((v - mu) ** 2).mean()
    hand = (v - mu) / np.sqrt(var + 1e-5) * 2.0 + 0.5
    assert np.abs(ad.layer_norm(v, np.full(4, 2.0), np.full(4, 0.5)).data - hand).max() < 1e-12


def test_backward_examples(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    assert np.array_equal(ad.backward(ad.tsum(x))[x], np.ones((3, 4)))
    W = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = ad.backward(ad.tsum(ad.linear(x, W)))
    assert np.allclose(g[W], np.repeat(x.data.sum(0)[:, None], 2, axis=1), rtol=0, atol=1e-14)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.mul(x, 2.0))


def test_fan_out_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.mul(x, 3.0))
    g = ad.backward(ad.tsum(y))
    assert np.array_equal(g[x], 2 * x.data + 3.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and y.parents == ()


def test_tabs_subgradient_zero_at_tie():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    assert ad.backward(ad.tsum(ad.tabs(x)))[x].tolist() == [-1.0, 0.0, 1.0]


def test_einsum_rejects_dangling_index():
    with pytest.raises(ContractError):
        ad.einsum("ij,jk->i", np.ones((2, 3)), np.ones((3, 4)))


# ---------------------------------------------------------------------------
# Finite-difference checks of every primitive
# ---------------------------------------------------------------------------

TOL = 1e-4


def _t(rng, *shape, positive=False):
    v = rng.standard_normal(shape)
    return Tensor(np.abs(v) + 0.5 if positive else v, requires_grad=True)


def _weights(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _check(fn, tensors):
    return ad.gradcheck(fn, tensors, max_per_tensor=30, rng=np.random.default_rng(0))


def _weighted(y, w):
    return ad.tsum(ad.mul(y, w))


PRIMITIVE_CASES = {
    "add_broadcast": lambda r: ((a := _t(r, 3, 4), b := _t(r, 4)),
                                lambda: _weighted(ad.add(a, b), _weights(np.random.default_rng(1), (3, 4)))),
    "sub_broadcast": lambda r: ((a := _t(r, 2, 1, 3), b := _t(r, 4, 1)),
                                lambda: _weighted(ad.sub(a, b), _weights(np.random.default_rng(1), (2, 4, 3)))),
    "mul": lambda r: ((a := _t(r, 3, 4), b := _t(r, 3, 1)),
                      lambda: _weighted(ad.mul(a, b), _weights(np.random.default_rng(1), (3, 4)))),
    "div": lambda r: ((a := _t(r, 3, 4), b := _t(r, 4, positive=True)),
                      lambda: _weighted(ad.div(a, b), _weights(np.random.default_rng(1), (3, 4)))),
    "neg_exp": lambda r: ((a := _t(r, 5),), lambda: _weighted(ad.exp(ad.neg(a)), _weights(np.random.default_rng(1), (5,)))),
    "tabs": lambda r: ((a := _t(r, 6, positive=True),), lambda: ad.tsum(ad.tabs(ad.sub(a, 0.1)))),
    "sigmoid": lambda r: ((a := _t(r, 7),), lambda: _weighted(ad.sigmoid(a), _weights(np.random.default_rng(1), (7,)))),
    "silu": lambda r: ((a := _t(r, 7),), lambda: _weighted(ad.silu(a), _weights(np.random.default_rng(1), (7,)))),
    "softplus": lambda r: ((a := _t(r, 7),), lambda: _weighted(ad.softplus(a), _weights(np.random.default_rng(1), (7,)))),
    "reshape_transpose": lambda r: ((a := _t(r, 2, 3, 4),),
                                    lambda: _weighted(ad.transpose(ad.reshape(a, (6, 4)), (1, 0)),
                                                      _weights(np.random.default_rng(1), (4, 6)))),
    "broadcast_to": lambda r: ((a := _t(r, 3, 1),),
                               lambda: _weighted(ad.broadcast_to(a, (2, 3, 5)), _weights(np.random.default_rng(1), (2, 3, 5)))),
    "getitem": lambda r: ((a := _t(r, 4, 5),),
                          lambda: _weighted(a[np.array([0, 2, 2]), 1:4], _weights(np.random.default_rng(1), (3, 3)))),
    "sum_mean": lambda r: ((a := _t(r, 3, 4, 2),),
                           lambda: _weighted(ad.add(ad.tsum(a, axis=1), ad.mean(a, axis=1)),
                                             _weights(np.random.default_rng(1), (3, 2)))),
    "linear": lambda r: ((x := _t(r, 2, 3, 4), W := _t(r, 4, 5), b := _t(r, 5)),
                         lambda: _weighted(ad.linear(x, W, b), _weights(np.random.default_rng(1), (2, 3, 5)))),
    "einsum": lambda r: ((a := _t(r, 2, 3, 4), b := _t(r, 3, 4, 5)),
                         lambda: _weighted(ad.einsum("bki,kio->bko", a, b), _weights(np.random.default_rng(1), (2, 3, 5)))),
    "layer_norm": lambda r: ((x := _t(r, 3, 6), g := _t(r, 6), b := _t(r, 6)),
                             lambda: _weighted(ad.layer_norm(x, g, b), _weights(np.random.default_rng(1), (3, 6)))),
    "depthwise_conv2d": lambda r: ((x := _t(r, 2, 5, 6, 3), k := _t(r, 3, 3, 3)),
                                   lambda: _weighted(ad.depthwise_conv2d(x, k), _weights(np.random.default_rng(1), (2, 5, 6, 3)))),
    "cmul": lambda r: ((x := _t(r, 2, 3, 4, 2),),
                       lambda: _weighted(ad.cmul(x, np.random.default_rng(2).standard_normal((3, 4))
                                                 + 1j * np.random.default_rng(3).standard_normal((3, 4))),
                                         _weights(np.random.default_rng(1), (2, 3, 4, 2)))),
    "complex_abs": lambda r: ((x := _t(r, 3, 4, 2),),
                              lambda: _weighted(ad.complex_abs(x), _weights(np.random.default_rng(1), (3, 4)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradcheck(name):
    tensors, fn = PRIMITIVE_CASES[name](np.random.default_rng(7))
    assert _check(fn, list(tensors)) < TOL


def _dot_test(forward, adjoint_fn, x, y):
    lhs = np.vdot(forward(x), y).real
    rhs = np.vdot(x, adjoint_fn(y)).real
    return abs(lhs - rhs)


def _vjp(op, x_shape, seed=0):
    """Return (forward, adjoint) of a linear primitive via its backward rule."""
    def fwd(x):
        with ad.no_grad():
            return op(Tensor(x)).data

    def adj(g):
        x = Tensor(np.zeros(x_shape), requires_grad=True)
        y = op(x)
        return ad.backward(ad.tsum(ad.mul(y, Tensor(g))))[x]

    return fwd, adj


@pytest.mark.parametrize("case", ["transpose", "conv", "cmul", "getitem", "broadcast"])
def test_linear_primitive_adjoints(case, rng):
    k = rng.standard_normal((3, 3, 2))
    c = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
    ops = {
        "transpose": (lambda t: ad.transpose(t, (2, 0, 1)), (4, 5, 2)),
        "conv": (lambda t: ad.depthwise_conv2d(t, k), (4, 5, 2)),
        "cmul": (lambda t: ad.cmul(t, c), (4, 5, 2)),
        "getitem": (lambda t: t[np.array([1, 1, 3])], (4, 5, 2)),
        "broadcast": (lambda t: ad.broadcast_to(t, (3, 4, 5, 2)), (4, 5, 2)),
    }
    op, shape = ops[case]
    fwd, adj = _vjp(op, shape)
    x = rng.standard_normal(shape)
    y = rng.standard_normal(fwd(x).shape)
    assert _dot_test(fwd, adj, x, y) < 1e-10


@given(st.integers(1, 4), st.integers(1, 4), st.booleans())
def test_broadcast_gradients_sum_to_shape(rows, cols, keep_row):
    rng = np.random.default_rng(rows * 10 + cols)
    a = Tensor(rng.standard_normal((rows, cols)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, cols) if keep_row else (cols,)), requires_grad=True)
    g = ad.backward(ad.tsum(ad.mul(a, b)))
    assert g[b].shape == b.shape
    assert np.allclose(g[b].reshape(-1), a.data.sum(0), rtol=0, atol=1e-13)
    assert np.allclose(g[a], np.broadcast_to(b.data, a.shape), rtol=0, atol=0)
