# Compiled 3x3 stride-1 same-padding conv kernels, NHWC layout.
# Rows are distributed over OpenMP threads; each output pixel accumulates
# into a stack buffer so the inner channel loop vectorizes and the output
# is written once. Channel counts are capped at 512 (checked by the wrapper).

import numpy as np

cimport cython
from cython.parallel cimport prange

ctypedef fused floating:
    float
    double

DEF MAX_CHANNELS = 512


@cython.boundscheck(False)
@cython.wraparound(False)
cdef inline void _conv_row(const floating* xb, const floating* w, floating* outrow,
                           Py_ssize_t i, Py_ssize_t H, Py_ssize_t W,
                           Py_ssize_t Ci, Py_ssize_t Co) noexcept nogil:
    cdef floating acc[MAX_CHANNELS]
    cdef Py_ssize_t j, di, dj, ci, co, ii, jj, di0, di1, dj0, dj1
    cdef const floating* xp
    cdef const floating* wp
    cdef floating a
    di0 = 1 if i == 0 else 0
    di1 = 2 if i == H - 1 else 3
    for j in range(W):
        dj0 = 1 if j == 0 else 0
        dj1 = 2 if j == W - 1 else 3
        for co in range(Co):
            acc[co] = 0
        for di in range(di0, di1):
            ii = i + di - 1
            for dj in range(dj0, dj1):
                jj = j + dj - 1
                xp = xb + (ii * W + jj) * Ci
                wp = w + (di * 3 + dj) * Ci * Co
                for ci in range(Ci):
                    a = xp[ci]
                    for co in range(Co):
                        acc[co] = acc[co] + a * wp[ci * Co + co]
        for co in range(Co):
            outrow[j * Co + co] = acc[co]


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[:, :, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t Co = w.shape[3]
    cdef Py_ssize_t r, b, i
    cdef const floating* xptr = &x[0, 0, 0, 0]
    cdef const floating* wptr = &w[0, 0, 0, 0]
    cdef floating* optr = &out[0, 0, 0, 0]
    for r in prange(B * H, nogil=True, schedule='static'):
        b = r // H
        i = r - b * H
        _conv_row(xptr + b * H * W * Ci, wptr, optr + (b * H + i) * W * Co,
                  i, H, W, Ci, Co)


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_bwd_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] gy, floating[:, :, :, ::1] gw):
    # gw[di,dj,ci,co] = sum_{b,i,j} x[b, i+di-1, j+dj-1, ci] * gy[b, i, j, co]
    # One OpenMP task per (di, dj) offset: disjoint output slices, no races.
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Ci = x.shape[3]
    cdef Py_ssize_t Co = gy.shape[3]
    cdef Py_ssize_t k, di, dj, b, i, j, ci, co, ii, jj, j0, j1
    cdef const floating* xp
    cdef const floating* gp
    cdef floating* gwp
    cdef floating a
    for k in prange(9, nogil=True, schedule='dynamic'):
        di = k // 3
        dj = k - di * 3
        gwp = &gw[di, dj, 0, 0]
        j0 = 1 if dj == 0 else 0
        j1 = W - 1 if dj == 2 else W
        for b in range(B):
            for i in range(H):
                ii = i + di - 1
                if ii < 0 or ii >= H:
                    continue
                for j in range(j0, j1):
                    jj = j + dj - 1
                    xp = &x[b, ii, jj, 0]
                    gp = &gy[b, i, j, 0]
                    for ci in range(Ci):
                        a = xp[ci]
                        for co in range(Co):
                            gwp[ci * Co + co] += a * gp[co]
