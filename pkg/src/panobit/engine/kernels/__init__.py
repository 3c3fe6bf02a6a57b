"""Conv kernel dispatch: compiled extension if built, numpy otherwise.

Set PANOBIT_FORCE_NUMPY=1 to skip the extension (used by the kernel
benchmark and by parity tests).
"""

import os

import numpy as np

from . import numpy_kernels

if os.environ.get("PANOBIT_FORCE_NUMPY"):
    _native = None
else:
    try:
        from . import _conv_native as _native
    except ImportError:
        _native = None

HAVE_NATIVE = _native is not None


# stack accumulator size in the compiled kernel
_NATIVE_MAX_CHANNELS = 512


def conv2d_fwd(x, w):
    if _native is None or w.shape[3] > _NATIVE_MAX_CHANNELS:
        return numpy_kernels.conv2d_fwd(x, w)
    out = np.empty(x.shape[:3] + (w.shape[3],), dtype=x.dtype)
    _native.conv2d_fwd(x, w, out)
    return out


def conv2d_bwd_input(gy, w):
    if _native is None or w.shape[2] > _NATIVE_MAX_CHANNELS:
        return numpy_kernels.conv2d_bwd_input(gy, w)
    wt = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    out = np.empty(gy.shape[:3] + (wt.shape[3],), dtype=gy.dtype)
    _native.conv2d_fwd(gy, wt, out)
    return out


def conv2d_bwd_weight(x, gy):
    if _native is None:
        return numpy_kernels.conv2d_bwd_weight(x, gy)
    gw = np.zeros((3, 3, x.shape[3], gy.shape[3]), dtype=x.dtype)
    _native.conv2d_bwd_weight(x, gy, gw)
    return gw
