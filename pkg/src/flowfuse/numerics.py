"""Deterministic numeric substrate for the invertible-model stack.

Everything here operates on plain numpy arrays:

* image tensors are rank-4 ``(batch, channels, height, width)`` arrays,
  float32 by default with a float64 mode for gradient checking;
* channel-mixing matrices are small square ``(C, C)`` arrays;
* randomness always goes through :func:`make_rng` (PCG64), so a seed fully
  determines every stream on every platform.

Internally the convolution kernels work on a channel-first ``(C, N, H, W)``
layout: with kernels stored as ``(out, in, 3, 3)``, both the im2col matrix
and every GEMM operand are then plain reshapes or BLAS-transposed views,
which keeps the hot path free of strided permutation copies. The public
entry points take the ordinary ``(N, C, H, W)`` layout.

All operations are pure and use fixed reduction orders, so repeated calls
with identical inputs are bitwise identical within a build.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import NonFiniteError, ShapeError, SingularMatrixError

DEFAULT_DTYPE = np.float32

# minimum |det| of the row-equilibrated mixing matrix; anything smaller is
# rejected before it can poison an inverse pass
DET_EPS = 1e-8


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed means identical stream."""
    return np.random.default_rng(seed)


def as_plane(x, name: str = "tensor") -> np.ndarray:
    """Validate a rank-4 image tensor: shape, dtype, finiteness."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (N, C, H, W), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    require_finite(arr, name)
    return arr


def require_finite(x: np.ndarray, context: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {context}")


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    """Elementwise max(x, slope*x) for slope in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    return np.maximum(x, np.asarray(slope, dtype=x.dtype) * x)


def leaky_relu_grad(pre: np.ndarray, slope: float) -> np.ndarray:
    """Derivative of leaky_relu evaluated at the pre-activation values."""
    one = np.asarray(1.0, dtype=pre.dtype)
    return np.where(pre > 0, one, np.asarray(slope, dtype=pre.dtype))


def _check_conv_args(channels: int, kernels: np.ndarray, bias: np.ndarray) -> None:
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"kernels must be (out, in, 3, 3), got {kernels.shape}")
    if kernels.shape[1] != channels:
        raise ShapeError(
            f"channel mismatch: input has {channels} channels, kernels expect {kernels.shape[1]}"
        )
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[0]} output channels")
    if not np.isfinite(kernels).all() or not np.isfinite(bias).all():
        raise NonFiniteError("non-finite convolution weights")


def _pad_cnhw(x: np.ndarray) -> np.ndarray:
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1 : 1 + h, 1 : 1 + w] = x
    return xp


def _cols_cnhw(xp: np.ndarray) -> np.ndarray:
    """Padded (C, N, Hp, Wp) input -> (C*9, N*H*W) im2col matrix."""
    c, n, hp, wp = xp.shape
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # C, N, H, W, 3, 3
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(c * 9, n * (hp - 2) * (wp - 2))


def _conv_cnhw_numpy(xp: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
                     out: np.ndarray) -> None:
    out_ch = kernels.shape[0]
    y2 = kernels.reshape(out_ch, -1) @ _cols_cnhw(xp)
    y2 += bias[:, None]
    out[...] = y2.reshape(out.shape)


def _conv_padded(xp: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Dispatch to the numba kernel when available, else the im2col path."""
    c, n, hp, wp = xp.shape
    out = np.empty((kernels.shape[0], n, hp - 2, wp - 2), dtype=xp.dtype)
    if _kernels.HAVE_NUMBA:
        _kernels.conv3x3_padded(xp, kernels, bias, out)
    else:
        _conv_cnhw_numpy(xp, kernels, bias, out)
    return out


def conv_cnhw(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 same convolution on the internal (C, N, H, W) layout."""
    return _conv_padded(_pad_cnhw(x), kernels, bias)


def conv_cnhw_vjp(
    x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv_cnhw w.r.t. input, kernels and bias.

    The input gradient is the same 3x3 convolution with flipped, transposed
    kernels applied to the padded output gradient; the kernel gradient is
    nine clean GEMMs over flat shifted views, one per tap, so the whole
    backward stays allocation-light and order-deterministic.
    """
    c, n, h, w = x.shape
    out_ch = kernels.shape[0]

    grad_bias = grad_out.sum(axis=(1, 2, 3))

    gyp = _pad_cnhw(grad_out)
    flipped = np.ascontiguousarray(kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = _conv_padded(gyp, flipped, np.zeros(c, dtype=x.dtype))

    xp = _pad_cnhw(x)
    wp = w + 2
    length = n * (h + 2) * wp
    gy_flat = gyp.reshape(out_ch, length)
    x_flat = xp.reshape(c, length)
    grad_kernels = np.empty_like(kernels)
    for i in range(3):
        for j in range(3):
            off = (i - 1) * wp + (j - 1)
            lo, hi = max(0, -off), min(length, length - off)
            grad_kernels[:, :, i, j] = gy_flat[:, lo:hi] @ x_flat[:, lo + off : hi + off].T
    return grad_x, grad_kernels, grad_bias


def to_cnhw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def from_cnhw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def conv2d_same(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1; spatial dims preserved.

    ``x`` is (N, C, H, W), ``kernels`` (out_ch, in_ch, 3, 3), ``bias``
    (out_ch,). Output is (N, out_ch, H, W) with the input's height/width.
    """
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d_same input must be rank-4, got shape {x.shape}")
    _check_conv_args(x.shape[1], kernels, bias)
    y = from_cnhw(conv_cnhw(to_cnhw(x), kernels, bias))
    require_finite(y, "conv2d_same output")
    return y


def conv2d_same_vjp(
    x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_same w.r.t. input, kernels and bias (NCHW layout)."""
    gx, gw, gb = conv_cnhw_vjp(to_cnhw(x), np.asarray(kernels), to_cnhw(grad_out))
    return from_cnhw(gx), gw, gb


def mat_inverse(matrix: np.ndarray, context: str = "mixing") -> np.ndarray:
    """Invert a small square matrix with a det guard.

    The guard applies to the row-equilibrated matrix (each row divided by its
    max-abs entry), which makes the threshold scale-free. Inversion runs in
    float64 and is cast back to the input dtype.
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"{context}: expected a square matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise NonFiniteError(f"non-finite entries in {context} matrix")

    m64 = matrix.astype(np.float64)
    row_scale = np.abs(m64).max(axis=1)
    if np.any(row_scale == 0.0):
        raise SingularMatrixError(f"{context}: matrix has an all-zero row")
    det = np.linalg.det(m64 / row_scale[:, None])
    if abs(det) <= DET_EPS:
        raise SingularMatrixError(
            f"{context}: matrix is numerically singular (equilibrated |det| = {abs(det):.3e})"
        )
    inv = np.linalg.inv(m64)
    return inv.astype(matrix.dtype)
