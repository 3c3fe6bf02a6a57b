"""Pure-numpy conv kernels (im2col + BLAS matmul).

Used as the fallback when the compiled extension is unavailable, and as an
independent reference in kernel parity tests. Layout is NHWC with 3x3
filters stored as [3, 3, C_in, C_out]; stride 1, zero "same" padding.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _im2col(x):
    """[B,H,W,C] -> [B*H*W, 9*C] patch matrix (zero same padding)."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    sb, sh, sw, sc = xp.strides
    patches = as_strided(
        xp,
        shape=(b, h, w, 3, 3, c),
        strides=(sb, sh, sw, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(patches).reshape(b * h * w, 9 * c)


def conv2d_fwd(x, w):
    b, h, wd, ci = x.shape
    co = w.shape[3]
    cols = _im2col(x)
    y = cols @ w.reshape(9 * ci, co)
    return y.reshape(b, h, wd, co)


def conv2d_bwd_input(gy, w):
    # d/dx of stride-1 same-padded correlation: correlate gy with the
    # spatially flipped kernel, in/out channels swapped.
    wt = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return conv2d_fwd(gy, wt)


def conv2d_bwd_weight(x, gy):
    b, h, w, ci = x.shape
    co = gy.shape[3]
    xp = np.zeros((b, h + 2, w + 2, ci), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    gw = np.empty((3, 3, ci, co), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            window = xp[:, di : di + h, dj : dj + w, :]
            gw[di, dj] = np.tensordot(window, gy, axes=([0, 1, 2], [0, 1, 2]))
    return gw
