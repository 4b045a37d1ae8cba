# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: typed loops for the conv/pool data movement.

Same contracts and bitwise-identical outputs as py_backend; selected at
import by cilbench._kernels when the extension is available.
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memcpy, memset

cnp.import_array()

NAME = "cython"


def im2col_nhwc(cnp.ndarray[cnp.float32_t, ndim=4] x, int kh, int kw,
                int stride, int out_h, int out_w, int pad=0, out=None):
    """Patch matrix with implicit zero padding (no padded copy of x)."""
    cdef int n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] cols
    if out is None:
        cols = np.empty((n * out_h * out_w, kh * kw * c), dtype=np.float32)
    else:
        cols = out
    cdef float[:, :, :, ::1] src = x
    cdef float[:, ::1] dst = cols
    cdef int i, oh, ow, ki, row, r, c0, lo, hi, valid
    cdef size_t run = kw * c * sizeof(float)
    # kw consecutive taps are contiguous in the W dimension: one memcpy per ki
    with nogil:
        for i in range(n):
            for oh in range(out_h):
                for ow in range(out_w):
                    row = (i * out_h + oh) * out_w + ow
                    for ki in range(kh):
                        r = oh * stride + ki - pad
                        c0 = ow * stride - pad
                        if r < 0 or r >= h or c0 + kw <= 0 or c0 >= w:
                            memset(&dst[row, ki * kw * c], 0, run)
                            continue
                        lo = -c0 if c0 < 0 else 0
                        hi = w - c0 if c0 + kw > w else kw
                        if lo == 0 and hi == kw:
                            memcpy(&dst[row, ki * kw * c], &src[i, r, c0, 0], run)
                        else:
                            if lo > 0:
                                memset(&dst[row, ki * kw * c], 0, lo * c * sizeof(float))
                            memcpy(&dst[row, (ki * kw + lo) * c], &src[i, r, c0 + lo, 0],
                                   (hi - lo) * c * sizeof(float))
                            if hi < kw:
                                memset(&dst[row, (ki * kw + hi) * c], 0,
                                       (kw - hi) * c * sizeof(float))
    return cols


def col2im_nhwc(cnp.ndarray[cnp.float32_t, ndim=2] dcols, int n, int hp,
                int wp, int c, int kh, int kw, int stride, int out_h, int out_w):
    cdef cnp.ndarray[cnp.float32_t, ndim=4] dxp = np.zeros(
        (n, hp, wp, c), dtype=np.float32)
    cdef float[:, ::1] src = dcols
    cdef float[:, :, :, ::1] dst = dxp
    cdef int i, oh, ow, ki, kj, j, row, col
    # (ki,kj) outermost: matches the accumulation order of the numpy backend.
    with nogil:
        for ki in range(kh):
            for kj in range(kw):
                col = (ki * kw + kj) * c
                for i in range(n):
                    for oh in range(out_h):
                        for ow in range(out_w):
                            row = (i * out_h + oh) * out_w + ow
                            for j in range(c):
                                dst[i, oh * stride + ki, ow * stride + kj, j] += src[row, col + j]
    return dxp


def bias_relu_inplace(cnp.ndarray[cnp.float32_t, ndim=2] y,
                      cnp.ndarray[cnp.float32_t, ndim=1] bias, bint apply_relu):
    """y[m,o] = max(y[m,o] + bias[o], 0) in one pass (relu optional)."""
    cdef int m = y.shape[0], o = y.shape[1]
    cdef float[:, ::1] yy = y
    cdef float[::1] bb = bias
    cdef int i, j
    cdef float v
    with nogil:
        for i in range(m):
            for j in range(o):
                v = yy[i, j] + bb[j]
                if apply_relu and v < 0:
                    v = 0
                yy[i, j] = v
    return y


def relu_bwd_inplace(cnp.ndarray[cnp.float32_t, ndim=2] g,
                     cnp.ndarray[cnp.float32_t, ndim=2] out):
    """g *= (out > 0), in place (branchless, vectorizable)."""
    cdef long total = g.shape[0] * g.shape[1]
    cdef float* gg = <float*> g.data
    cdef float* oo = <float*> out.data
    cdef long i
    with nogil:
        for i in range(total):
            gg[i] = gg[i] if oo[i] > 0 else 0
    return g


def maxpool_fwd_nhwc(cnp.ndarray[cnp.float32_t, ndim=4] x, int window,
                     int stride, int out_h, int out_w):
    cdef int n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] out = np.empty(
        (n, out_h, out_w, c), dtype=np.float32)
    cdef cnp.ndarray[cnp.int32_t, ndim=4] idx = np.empty(
        (n, out_h, out_w, c), dtype=np.int32)
    cdef float[:, :, :, ::1] src = x
    cdef float[:, :, :, ::1] o = out
    cdef int[:, :, :, ::1] ix = idx
    cdef int i, oh, ow, wi, wj, j, ih, iw, r, q, base
    cdef float v, best, a0, a1, a2, a3
    cdef int best_at
    if window == 2:
        # branchless 2x2 specialization: first occurrence in scan order wins
        with nogil:
            for i in range(n):
                for oh in range(out_h):
                    r = oh * stride
                    for ow in range(out_w):
                        q = ow * stride
                        base = r * w + q
                        for j in range(c):
                            a0 = src[i, r, q, j]
                            a1 = src[i, r, q + 1, j]
                            a2 = src[i, r + 1, q, j]
                            a3 = src[i, r + 1, q + 1, j]
                            best = a0
                            if a1 > best: best = a1
                            if a2 > best: best = a2
                            if a3 > best: best = a3
                            o[i, oh, ow, j] = best
                            ix[i, oh, ow, j] = (
                                base if a0 == best
                                else base + 1 if a1 == best
                                else base + w if a2 == best
                                else base + w + 1
                            )
        return out, idx
    with nogil:
        for i in range(n):
            for oh in range(out_h):
                for ow in range(out_w):
                    for j in range(c):
                        best = src[i, oh * stride, ow * stride, j]
                        best_at = (oh * stride) * w + ow * stride
                        for wi in range(window):
                            ih = oh * stride + wi
                            for wj in range(window):
                                if wi == 0 and wj == 0:
                                    continue
                                iw = ow * stride + wj
                                v = src[i, ih, iw, j]
                                if v > best:  # strict: first occurrence wins ties
                                    best = v
                                    best_at = ih * w + iw
                        o[i, oh, ow, j] = best
                        ix[i, oh, ow, j] = best_at
    return out, idx


def maxpool_bwd_nhwc(cnp.ndarray[cnp.float32_t, ndim=4] dy,
                     cnp.ndarray[cnp.int32_t, ndim=4] idx, int h, int w):
    cdef int n = dy.shape[0], out_h = dy.shape[1], out_w = dy.shape[2], c = dy.shape[3]
    cdef cnp.ndarray[cnp.float32_t, ndim=4] dx = np.zeros(
        (n, h, w, c), dtype=np.float32)
    cdef float[:, :, :, ::1] g = dy
    cdef int[:, :, :, ::1] ix = idx
    cdef float[:, :, :, ::1] d = dx
    cdef int i, oh, ow, j, at
    with nogil:
        for i in range(n):
            for oh in range(out_h):
                for ow in range(out_w):
                    for j in range(c):
                        at = ix[i, oh, ow, j]
                        d[i, at / w, at % w, j] += g[i, oh, ow, j]
    return dx
