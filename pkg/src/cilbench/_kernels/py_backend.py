"""Pure-NumPy kernels: the fallback backend.

These four entry points are the data-movement hot loops behind conv and
pooling (the matrix products themselves go through BLAS in the caller and
are shared by both backends). The compiled backend in cy_backend.pyx
implements the same contracts with bitwise-identical outputs; see
tests/test_kernels.py for the parity check.

Layout is NHWC throughout; `xp` is already padded by the caller.
"""

import numpy as np

NAME = "python"


def im2col_nhwc(x, kh, kw, stride, out_h, out_w, pad=0, out=None):
    """(N,H,W,C) -> contiguous (N*out_h*out_w, kh*kw*C) patch matrix with
    implicit zero padding."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    n, hp, wp, c = x.shape
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        (n, out_h, out_w, kh, kw, c),
        (s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    flat = windows.reshape(n * out_h * out_w, kh * kw * c)
    if out is None:
        return np.ascontiguousarray(flat)
    np.copyto(out, flat)
    return out


def col2im_nhwc(dcols, n, hp, wp, c, kh, kw, stride, out_h, out_w):
    """Scatter-add patch gradients back onto the padded input shape.

    Accumulation order per destination element is row-major over (ki,kj);
    the compiled backend preserves the same order.
    """
    dxp = np.zeros((n, hp, wp, c), dtype=np.float32)
    d = dcols.reshape(n, out_h, out_w, kh, kw, c)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, ki : ki + stride * out_h : stride, kj : kj + stride * out_w : stride, :] += d[
                :, :, :, ki, kj, :
            ]
    return dxp


def bias_relu_inplace(y, bias, apply_relu):
    """y[m,o] = max(y[m,o] + bias[o], 0) (relu optional); in place."""
    y += bias
    if apply_relu:
        np.maximum(y, 0.0, out=y)
    return y


def relu_bwd_inplace(g, out):
    """g *= (out > 0), in place."""
    g[out <= 0] = 0.0
    return g


def maxpool_fwd_nhwc(x, window, stride, out_h, out_w):
    """Per-window max. Returns (out, idx) where idx holds the flat H*W
    position of the argmax, first occurrence in window scan order on ties."""
    n, h, w, c = x.shape
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        (n, out_h, out_w, window, window, c),
        (s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    flat = np.ascontiguousarray(windows.reshape(n, out_h, out_w, window * window, c))
    am = flat.argmax(axis=3)
    out = flat.max(axis=3)
    wi, wj = am // window, am % window
    oh = np.arange(out_h, dtype=np.int64)[None, :, None, None]
    ow = np.arange(out_w, dtype=np.int64)[None, None, :, None]
    idx = (oh * stride + wi) * w + (ow * stride + wj)
    return out, idx.astype(np.int32)


def maxpool_bwd_nhwc(dy, idx, h, w):
    """Route each output gradient to its recorded argmax position."""
    n, out_h, out_w, c = dy.shape
    dx = np.zeros((n, h * w, c), dtype=np.float32)
    ni = np.arange(n, dtype=np.int64)[:, None, None]
    ci = np.arange(c, dtype=np.int64)[None, None, :]
    flat_idx = idx.reshape(n, out_h * out_w, c).astype(np.int64)
    np.add.at(dx, (ni, flat_idx, ci), dy.reshape(n, out_h * out_w, c))
    return dx.reshape(n, h, w, c)
