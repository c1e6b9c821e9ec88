from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmrecon import autodiff as ad
from ssmrecon.config import load_config
from ssmrecon.errors import ConfigError, ShapeError
from ssmrecon.forward_model import complex_image, generate_gaussian_mask
from ssmrecon.fourier import fft2c_np, ifft2c_np
from ssmrecon.network import (REFERENCE_PARAM_COUNT, NetworkConfig, build, count_tensors,
                              named_tensors, param_count, reconstruct)

from conftest import complex_randn

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_param_count_hand_examples():
    # only_dc, D=4, p=1: embed 2*4+4, head 4*2+2, one DC pair 10 + 12
    assert param_count(NetworkConfig(depth=1, dim=4, patch=1, variant="only_dc")) == 44
    # mamba, D=2, N=1, p=1, rank 1: the above pattern 24 plus a 58-scalar block
    # norm1 4 + in/gate 12 + conv 18 + norm2 4 + out 6 + ssm (6 + 4 + 4)
    assert param_count(NetworkConfig(depth=1, dim=2, state_dim=1, patch=1)) == 24 + 58
    # depth 1, D=8, N=2, p=2 (2p^2 = 8, dt rank 1):
    # embed 72 + head 72 + DC pair 144
    # + block: norm1 16, in/gate 144, conv 72, norm2 16, out 72, ssm 48 + 16 + 16
    assert param_count(NetworkConfig(depth=1, dim=8, state_dim=2, patch=2)) == 288 + 400 == 688


@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 4), st.sampled_from([1, 2, 4]),
       st.integers(1, 2), st.booleans(), st.sampled_from([0, 1.5, 4]),
       st.sampled_from(["mamba", "only_dc"]))
def test_closed_form_matches_instantiation(depth, dim, N, p, expand, per_dir, mlp, variant):
    cfg = NetworkConfig(depth=depth, dim=dim, state_dim=N, patch=p, height=8, width=8,
                        expand=expand, per_direction=per_dir, mlp_ratio=mlp, variant=variant)
    assert param_count(cfg) == count_tensors(build(cfg))


def test_param_count_linear_in_depth():
    counts = [param_count(NetworkConfig(depth=d, dim=16)) for d in (1, 2, 3, 4)]
    assert len(set(np.diff(counts))) == 1


def test_full_size_config_near_reference():
    n = param_count(load_config(CONFIGS / "paper.cfg").network())
    assert 0.7 <= n / REFERENCE_PARAM_COUNT <= 1.3


def test_build_is_seeded():
    cfg = NetworkConfig(depth=2, dim=8, height=16, width=16)
    a, b, c = build(cfg, 0), build(cfg, 0), build(cfg, 1)
    for (na, ta), (_, tb), (_, tc) in zip(named_tensors(a), named_tensors(b), named_tensors(c)):
        assert np.array_equal(ta.data, tb.data), na
    assert any(not np.array_equal(ta.data, tc.data)
               for (_, ta), (_, tc) in zip(named_tensors(a), named_tensors(c)))


def test_only_dc_has_no_state_space_blocks():
    prm = build(NetworkConfig(depth=3, dim=8, variant="only_dc", height=16, width=16))
    assert prm.vssm == [] and len(prm.dc) == 3
    assert not any("ssm" in n for n, _ in named_tensors(prm))


def test_invalid_configs():
    for kw in (dict(depth=0), dict(variant="unet"), dict(patch=3), dict(bbar_mode="x"),
               dict(conv_kernel=4)):
        with pytest.raises(ConfigError):
            NetworkConfig(**kw).validate()


def _inputs(rng, H=16, R=4):
    M = generate_gaussian_mask(H, H, R, calib=4, seed=2).grid
    C = np.ones((1, H, H), complex)
    x_us = ifft2c_np(fft2c_np(complex_randn(rng, H, H)) * M)
    return complex_image(x_us), M, C


@pytest.mark.parametrize("variant", ["mamba", "only_dc"])
def test_reconstruction_is_data_consistent(rng, variant):
    cfg = NetworkConfig(depth=2, dim=8, state_dim=4, height=16, width=16, variant=variant)
    prm = build(cfg, 3)
    prm.head.W.data[...] = rng.standard_normal(prm.head.W.shape)
    x_us, M, C = _inputs(rng)
    with ad.no_grad():
        out = reconstruct(np.stack([x_us, 2 * x_us]), M, C, prm, cfg).data
    assert np.all(np.isfinite(out))
    for b, s in enumerate((1, 2)):
        k_out = fft2c_np(ad.to_complex(out[b]))
        k_in = fft2c_np(ad.to_complex(s * x_us))
        assert np.abs((k_out - k_in) * M).max() < 1e-9 * np.abs(k_in).max()
    assert np.abs((k_out - k_in) * (1 - M)).max() > 1e-3


def test_zero_head_returns_input_and_full_mask_returns_input(rng):
    cfg = NetworkConfig(depth=1, dim=8, state_dim=4, height=16, width=16)
    prm = build(cfg)
    x_us, M, C = _inputs(rng)
    with ad.no_grad():
        assert np.abs(reconstruct(x_us, M, C, prm, cfg).data - x_us).max() < 1e-12
        prm.head.W.data[...] = 1.0
        full = reconstruct(x_us, np.ones_like(M), C, prm, cfg).data
    assert np.abs(full - x_us).max() < 1e-12


def test_shape_mismatch(rng):
    cfg = NetworkConfig(depth=1, dim=4, height=16, width=16)
    with pytest.raises(ShapeError):
        reconstruct(np.zeros((8, 8, 2)), np.ones((8, 8)), np.ones((1, 8, 8)), build(cfg), cfg)


def test_network_gradcheck_small(rng):
    cfg = NetworkConfig(depth=1, dim=4, state_dim=2, height=8, width=8)
    prm = build(cfg, 1)
    prm.head.W.data[...] = 0.3 * rng.standard_normal(prm.head.W.shape)
    for s in prm.vssm:
        s.ssm.b_dt.data[...] = 0.0
    x_us, M, C = _inputs(rng, H=8, R=2)
    ref = rng.standard_normal((8, 8, 2))
    tensors = [t for _, t in named_tensors(prm)]
    err = ad.gradcheck(lambda: ad.tsum(ad.mul(reconstruct(x_us, M, C, prm, cfg), ref)), tensors,
                       h=1e-4, max_per_tensor=3, rng=np.random.default_rng(0))
    assert err < 1e-4
