import numpy as np
import pytest

from ssmrecon import autodiff as ad
from ssmrecon.autodiff import Tensor
from ssmrecon.errors import ConfigError, ShapeError
from ssmrecon.vssm import (direction_orders, fold_merge, init_affine, init_vssm_block,
                           patch_embed, unfold_directions, unpatchify, vssm_forward)


def test_direction_orders_3x2():
    o = direction_orders(3, 2)
    assert o.tolist() == [[0, 1, 2, 3, 4, 5], [5, 4, 3, 2, 1, 0],
                          [0, 2, 4, 1, 3, 5], [5, 3, 1, 4, 2, 0]]


def test_unfold_then_fold_is_four_times_identity(rng):
    t = rng.standard_normal((2, 4, 3, 5))
    seqs = unfold_directions(t)
    assert seqs.shape == (2, 4, 12, 5)
    assert np.array_equal(seqs.data[:, 0], t.reshape(2, 12, 5))
    assert np.array_equal(seqs.data[:, 1], t.reshape(2, 12, 5)[:, ::-1])
    assert np.array_equal(seqs.data[:, 2], t.transpose(0, 2, 1, 3).reshape(2, 12, 5))
    assert np.allclose(fold_merge(seqs, 4, 3).data, 4 * t, rtol=0, atol=1e-15)


def test_fold_is_adjoint_of_unfold(rng):
    t = rng.standard_normal((5, 3, 2))
    s = rng.standard_normal((4, 15, 2))
    lhs = np.vdot(unfold_directions(t).data, s)
    rhs = np.vdot(t, fold_merge(s, 5, 3).data)
    assert abs(lhs - rhs) < 1e-12


def test_fold_shape_errors():
    with pytest.raises(ShapeError):
        fold_merge(np.zeros((3, 6, 2)), 2, 3)
    with pytest.raises(ShapeError):
        fold_merge(np.zeros((4, 5, 2)), 2, 3)


def test_patch_embed_is_strided_conv(rng):
    p, D = 2, 3
    proj = init_affine(2 * p * p, D, rng)
    x = rng.standard_normal((4, 6, 2))
    out = patch_embed(x, p, proj).data
    W, b = proj.W.data.reshape(p, p, 2, D), proj.b.data
    for i in range(2):
        for j in range(3):
            patch = x[i * p:(i + 1) * p, j * p:(j + 1) * p]
            assert np.allclose(out[i, j], np.einsum("abc,abcd->d", patch, W) + b, atol=1e-14)


def test_unpatchify_inverts_embed_for_identity_weights(rng):
    p = 2
    eye = init_affine(8, 8, rng, zero=True)
    eye.W.data[...] = np.eye(8)
    x = rng.standard_normal((3, 4, 8, 2))
    assert np.array_equal(unpatchify(patch_embed(x, p, eye), p, eye).data, x)


def test_patch_errors(rng):
    with pytest.raises(ConfigError):
        patch_embed(np.zeros((6, 6, 2)), 4, init_affine(32, 3, rng))
    with pytest.raises(ShapeError):
        unpatchify(np.zeros((2, 2, 3)), 2, init_affine(3, 6, rng))


@pytest.mark.parametrize("per_dir,mlp", [(False, 0), (True, 2)])
def test_block_gradcheck(per_dir, mlp):
    rng = np.random.default_rng(7)
    prm = init_vssm_block(4, 2, rng, expand=2, per_direction=per_dir, mlp_ratio=mlp)
    prm.ssm.b_dt.data[...] = 0.0
    t = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 4, 4)))
    tensors = [t, prm.norm1.g, prm.in_proj.W, prm.gate_proj.b, prm.conv, prm.ssm.A_log,
               prm.ssm.W_B, prm.ssm.W_dt_up, prm.norm2.b, prm.out_proj.W]
    if mlp:
        tensors += [prm.fc1.W, prm.fc2.b, prm.mlp_norm.g]
    err = ad.gradcheck(lambda: ad.tsum(ad.mul(vssm_forward(t, prm), w)), tensors,
                       max_per_tensor=8, h=1e-4, rng=np.random.default_rng(0))
    assert err < 1e-5


def test_block_mixes_whole_grid_in_one_pass(rng):
    prm = init_vssm_block(3, 2, rng)
    prm.ssm.b_dt.data[...] = 0.0
    t = rng.standard_normal((6, 6, 3))
    with ad.no_grad():
        base = vssm_forward(t, prm).data
        t2 = t.copy()
        t2[0, 0] += rng.standard_normal(3)  # a constant shift would vanish in the norm
        moved = np.abs(vssm_forward(t2, prm).data - base).max(-1)
    # the forward scans carry the top-left token to every later position
    assert moved[5, 5] > 0 and moved[5, 0] > 0 and moved[0, 5] > 0


def test_block_batch_independence(rng):
    prm = init_vssm_block(3, 2, rng)
    t = rng.standard_normal((3, 4, 4, 3))
    with ad.no_grad():
        full = vssm_forward(t, prm).data
        one = vssm_forward(t[1], prm).data
    assert np.abs(full[1] - one).max() < 1e-13
