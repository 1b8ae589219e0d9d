"""Tests for the numeric substrate: convolution, inversion, activations."""

import numpy as np
import pytest

import flowfuse.numerics as num
from flowfuse.errors import NonFiniteError, ShapeError, SingularMatrixError
from flowfuse.numerics import (
    conv2d_same,
    conv2d_same_vjp,
    leaky_relu,
    leaky_relu_grad,
    make_rng,
    mat_inverse,
)
from oracles import conv2d_ref


def identity_kernel(channels=1, dtype=np.float32):
    k = np.zeros((channels, channels, 3, 3), dtype=dtype)
    for c in range(channels):
        k[c, c, 1, 1] = 1.0
    return k


class TestConv2dSame:
    def test_identity_kernel_passthrough(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        y = conv2d_same(x, identity_kernel(), np.zeros(1, np.float32))
        np.testing.assert_array_equal(y, x)

    def test_single_pixel_all_ones_kernel(self):
        # only the kernel center overlaps the lone pixel under zero padding
        x = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        k = np.ones((1, 1, 3, 3), dtype=np.float32)
        y = conv2d_same(x, k, np.zeros(1, np.float32))
        np.testing.assert_allclose(y, [[[[2.0]]]])

    def test_2x2_all_ones_kernel(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        k = np.ones((1, 1, 3, 3), dtype=np.float32)
        y = conv2d_same(x, k, np.zeros(1, np.float32))
        np.testing.assert_allclose(y[0, 0], [[10.0, 10.0], [10.0, 10.0]])

    def test_matches_bruteforce_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 6)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        np.testing.assert_allclose(conv2d_same(x, k, b), conv2d_ref(x, k, b),
                                   rtol=1e-5, atol=1e-5)

    def test_linearity(self, rng):
        x = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        y = rng.normal(size=(1, 2, 6, 6)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        zero_b = np.zeros(3, np.float32)
        lhs = conv2d_same(2.5 * x + 0.5 * y, k, zero_b)
        rhs = 2.5 * conv2d_same(x, k, zero_b) + 0.5 * conv2d_same(y, k, zero_b)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)

    def test_preserves_spatial_dims_and_batch(self, rng):
        x = rng.normal(size=(3, 2, 7, 9)).astype(np.float32)
        k = rng.normal(size=(5, 2, 3, 3)).astype(np.float32)
        y = conv2d_same(x, k, np.zeros(5, np.float32))
        assert y.shape == (3, 5, 7, 9)

    def test_channel_mismatch_raises(self, rng):
        x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
        k = rng.normal(size=(1, 3, 3, 3)).astype(np.float32)
        with pytest.raises(ShapeError):
            conv2d_same(x, k, np.zeros(1, np.float32))

    def test_nonfinite_weights_raise(self):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        k = identity_kernel()
        k[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            conv2d_same(x, k, np.zeros(1, np.float32))

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
        k = rng.normal(size=(4, 4, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        first = conv2d_same(x, k, b)
        for _ in range(3):
            np.testing.assert_array_equal(conv2d_same(x, k, b), first)

    def test_numba_and_numpy_paths_agree(self, rng):
        x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        xc = num.to_cnhw(x)
        fast = num.conv_cnhw(xc, k, b)
        reference = np.empty_like(fast)
        num._conv_cnhw_numpy(num._pad_cnhw(xc), k, b, reference)
        np.testing.assert_allclose(fast, reference, rtol=1e-5, atol=1e-6)


class TestConvVjp:
    def test_matches_finite_differences(self):
        rng = make_rng(5)
        x = rng.normal(size=(1, 2, 4, 4))
        k = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=2)
        gy = rng.normal(size=(1, 2, 4, 4))
        gx, gk, gb = conv2d_same_vjp(x, k, gy)
        step = 1e-6

        def loss(xx, kk, bb):
            return float((conv2d_same(xx, kk, bb) * gy).sum())

        for arr, grad in ((x, gx), (k, gk), (b, gb)):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + step
                up = loss(x, k, b)
                flat[idx] = orig - step
                down = loss(x, k, b)
                flat[idx] = orig
                np.testing.assert_allclose(gflat[idx], (up - down) / (2 * step),
                                           rtol=1e-4, atol=1e-7)


class TestMatInverse:
    def test_identity(self):
        eye = np.eye(3, dtype=np.float32)
        np.testing.assert_allclose(mat_inverse(eye), eye)

    def test_swap_involution(self):
        swap = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        np.testing.assert_allclose(mat_inverse(swap), swap)

    def test_diagonal(self):
        diag = np.diag([2.0, 4.0]).astype(np.float32)
        np.testing.assert_allclose(mat_inverse(diag), np.diag([0.5, 0.25]), rtol=1e-6)

    def test_product_is_identity(self, rng):
        w = rng.normal(size=(6, 6)).astype(np.float32) + 3 * np.eye(6, dtype=np.float32)
        residual = np.abs(w @ mat_inverse(w) - np.eye(6)).max()
        assert residual <= 1e-5

    def test_double_inverse_returns_original(self, rng):
        w = rng.normal(size=(4, 4)).astype(np.float32) + 2 * np.eye(4, dtype=np.float32)
        np.testing.assert_allclose(mat_inverse(mat_inverse(w)), w, rtol=1e-4)

    def test_singular_raises_with_context(self):
        singular = np.array([[1.0, 2.0], [2.0, 4.0]], dtype=np.float32)
        with pytest.raises(SingularMatrixError, match="block3"):
            mat_inverse(singular, context="block3.mixing")

    def test_scale_free_guard(self):
        # tiny but perfectly conditioned matrix must be accepted
        w = (1e-20 * np.eye(2)).astype(np.float64)
        np.testing.assert_allclose(mat_inverse(w) @ w, np.eye(2), atol=1e-10)

    def test_zero_row_raises(self):
        w = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
        with pytest.raises(SingularMatrixError):
            mat_inverse(w)


class TestLeakyRelu:
    @pytest.mark.parametrize("value,expected", [(3.0, 3.0), (-2.0, -0.2), (0.0, 0.0)])
    def test_pointwise(self, value, expected):
        x = np.array([[[[value]]]], dtype=np.float32)
        np.testing.assert_allclose(leaky_relu(x, 0.1), [[[[expected]]]], atol=1e-7)

    def test_bad_slope_rejected(self):
        with pytest.raises(ValueError):
            leaky_relu(np.zeros((1, 1, 1, 1)), 1.5)

    def test_grad_values(self):
        pre = np.array([-1.0, 0.0, 2.0], dtype=np.float32)
        np.testing.assert_allclose(leaky_relu_grad(pre, 0.2), [0.2, 0.2, 1.0])


class TestRng:
    def test_same_seed_same_stream(self):
        a = make_rng(99).normal(size=100)
        b = make_rng(99).normal(size=100)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(make_rng(1).normal(size=8), make_rng(2).normal(size=8))
