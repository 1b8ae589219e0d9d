"""Optional numba-compiled convolution kernel.

One kernel covers both the forward 3x3 convolution and the input-gradient
(which is the same convolution with flipped, transposed kernels). It runs
on the channel-first (C, N, H, W) layout with a pre-padded input, keeps the
width loop innermost so LLVM can vectorize it, and uses no fastmath, so the
accumulation order is fixed and results are bitwise reproducible.

If numba is unavailable (or FLOWFUSE_FORCE_NUMPY is set) the package falls
back to the pure-numpy path in :mod:`flowfuse.numerics`.
"""

from __future__ import annotations

import os

HAVE_NUMBA = False
conv3x3_padded = None

if not os.environ.get("FLOWFUSE_FORCE_NUMPY"):
    try:
        from numba import njit

        @njit(cache=True, fastmath=False)
        def conv3x3_padded(xp, kernels, bias, out):  # noqa: F811
            """out[o,n,h,w] = bias[o] + sum_{c,i,j} kernels[o,c,i,j] * xp[c,n,h+i,w+j]."""
            in_ch, n_batch, hp, wp = xp.shape
            height, width = hp - 2, wp - 2
            out_ch = kernels.shape[0]
            for n in range(n_batch):
                for h in range(height):
                    for o in range(out_ch):
                        for w in range(width):
                            out[o, n, h, w] = bias[o]
                        for c in range(in_ch):
                            for i in range(3):
                                for j in range(3):
                                    kv = kernels[o, c, i, j]
                                    for w in range(width):
                                        out[o, n, h, w] += kv * xp[c, n, h + i, w + j]

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - exercised only without numba
        pass
