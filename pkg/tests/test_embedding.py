"""Instance normalization, patching and embedding tests."""

import numpy as np
import pytest

from paratime import embedding as E
from paratime import tensor as T
from paratime.gradcheck import grad_check
from paratime.tensor import Tensor


def _t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# RevIN
# ---------------------------------------------------------------------------


def test_revin_constant_series():
    x = _t64([5.0, 5.0, 5.0, 5.0])
    out, state = E.revin_normalize(x)
    assert np.allclose(out.data, 0.0)
    assert state.mean[0] == 5.0
    assert state.std[0] >= 1e-5


def test_revin_already_standardized():
    out, _ = E.revin_normalize(_t64([-1.0, 1.0]))
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-4)


def test_revin_moment_oracle():
    rng = np.random.default_rng(0)
    x = _t64(rng.standard_normal(512) * 4.0 - 2.0)
    out, _ = E.revin_normalize(x)
    assert abs(out.data.mean()) < 1e-6
    assert abs(out.data.var() - 1.0) < 1e-4


def test_revin_round_trip_identity_affine():
    rng = np.random.default_rng(1)
    gain, bias = _t64([1.0]), _t64([0.0])
    for _ in range(50):
        x = _t64(rng.standard_normal(64) * rng.uniform(0.1, 10.0) + rng.uniform(-5, 5))
        out, state = E.revin_normalize(x, gain, bias)
        back = E.revin_denormalize(out, state, gain, bias)
        assert np.max(np.abs(back.data - x.data)) < 1e-6


def test_revin_denormalize_formula():
    state = E.RevinState(mean=np.array([3.0]), std=np.array([2.0]))
    y = _t64(np.zeros(5))
    assert np.allclose(E.revin_denormalize(y, state).data, 3.0)
    rng = np.random.default_rng(2)
    y = _t64(rng.standard_normal(7))
    got = E.revin_denormalize(y, state).data
    assert np.allclose(got, y.data * 2.0 + 3.0)


def test_revin_batched():
    rng = np.random.default_rng(3)
    x = _t64(rng.standard_normal((5, 32)) * 3.0 + 1.0)
    out, state = E.revin_normalize(x)
    assert out.shape == (5, 32)
    assert state.mean.shape == (5, 1)
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------


def test_patchify_shape_512():
    grid = E.PatchGrid(patch_len=16, length=512)
    assert grid.n_patches == 32
    x = _t64(np.zeros(512))
    assert E.patchify(x, grid).shape == (32, 16)


def test_patchify_rows_are_contiguous():
    grid = E.PatchGrid(patch_len=16, length=32)
    out = E.patchify(_t64(np.arange(32.0)), grid)
    assert np.array_equal(out.data[0], np.arange(16.0))
    assert np.array_equal(out.data[1], np.arange(16.0, 32.0))


def test_patchify_flatten_round_trip():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(64)
    grid = E.PatchGrid(patch_len=16, length=64)
    out = E.patchify(_t64(x), grid)
    assert np.array_equal(out.data.reshape(-1), x)


def test_patchify_pads_left_with_edge_value():
    grid = E.PatchGrid(patch_len=8, length=12)
    assert grid.n_patches == 2 and grid.pad == 4
    out = E.patchify(_t64(np.arange(12.0) + 1.0), grid)
    assert np.array_equal(out.data[0], [1, 1, 1, 1, 1, 2, 3, 4])


# ---------------------------------------------------------------------------
# embed
# ---------------------------------------------------------------------------


def _params64(patch_len=16, dim=8, n_patches=4, seed=0):
    return E.EmbedParams(patch_len, dim, n_patches, rng=np.random.default_rng(seed), dtype=np.float64)


def test_embed_all_zero_paths_give_zero():
    params = _params64()
    params.conv_kernels.data[:] = 0.0
    params.pos_table.data[:] = 0.0
    out = E.embed(_t64(np.zeros((4, 16))), params)
    assert np.array_equal(out.data, np.zeros((4, 8)))


def test_embed_conv_disabled_is_pure_linear():
    params = _params64()
    params.conv_kernels.data[:] = 0.0
    params.pos_table.data[:] = 0.0
    rng = np.random.default_rng(5)
    patches = rng.standard_normal((4, 16))
    out = E.embed(_t64(patches), params)
    assert np.allclose(out.data, patches @ params.w_linear.data)


def test_embed_token_locality():
    params = _params64()
    rng = np.random.default_rng(6)
    patches = rng.standard_normal((4, 16))
    base = E.embed(_t64(patches), params).data
    perturbed = patches.copy()
    perturbed[2] += 1.0
    out = E.embed(_t64(perturbed), params).data
    assert np.array_equal(out[0], base[0])
    assert np.array_equal(out[1], base[1])
    assert np.array_equal(out[3], base[3])
    assert not np.allclose(out[2], base[2])


def test_embed_gradient_wrt_linear_weights():
    params = _params64()
    rng = np.random.default_rng(7)
    patches = _t64(rng.standard_normal((4, 16)))

    def f(_):
        return T.tsum(T.sigmoid(E.embed(patches, params)))

    report = grad_check(f, params.w_linear, tol=1e-4)
    assert report.passed, str(report)


def test_embed_gradient_wrt_conv_and_pos():
    params = _params64(patch_len=8, dim=4, n_patches=3, seed=8)
    rng = np.random.default_rng(9)
    patches = _t64(rng.standard_normal((3, 8)))

    def f(_):
        return T.tsum(T.sigmoid(E.embed(patches, params)))

    for p in (params.conv_kernels, params.pos_table):
        report = grad_check(f, p, tol=1e-4)
        assert report.passed, str(report)
