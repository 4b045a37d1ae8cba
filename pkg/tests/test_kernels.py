"""Backend parity: the compiled and pure-NumPy kernels must agree bitwise."""

import numpy as np
import pytest

from cilbench._kernels import backend_name, get_backend

py = get_backend("python")
try:
    cy = get_backend("cython")
    HAVE_CY = True
except ImportError:
    cy = None
    HAVE_CY = False

needs_cy = pytest.mark.skipif(not HAVE_CY, reason="compiled backend not built")


def test_backend_selected():
    assert backend_name() in ("python", "cython")


@needs_cy
@pytest.mark.parametrize("pad", [0, 1, 2])
@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_parity(pad, stride):
    rng = np.random.default_rng(pad * 10 + stride)
    x = rng.standard_normal((3, 9, 9, 5)).astype(np.float32)
    oh = (9 + 2 * pad - 3) // stride + 1
    a = cy.im2col_nhwc(x, 3, 3, stride, oh, oh, pad)
    b = py.im2col_nhwc(x, 3, 3, stride, oh, oh, pad)
    assert a.shape == b.shape
    assert (a == b).all()


@needs_cy
def test_im2col_out_param_parity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 6, 6, 4)).astype(np.float32)
    out_a = np.empty((2 * 6 * 6, 9 * 4), np.float32)
    out_b = np.empty_like(out_a)
    cy.im2col_nhwc(x, 3, 3, 1, 6, 6, 1, out_a)
    py.im2col_nhwc(x, 3, 3, 1, 6, 6, 1, out_b)
    assert (out_a == out_b).all()


@needs_cy
def test_col2im_parity():
    rng = np.random.default_rng(4)
    for stride in (1, 2):
        oh = (8 + 2 - 3) // stride + 1
        dcols = rng.standard_normal((2 * oh * oh, 9 * 3)).astype(np.float32)
        a = cy.col2im_nhwc(dcols, 2, 10, 10, 3, 3, 3, stride, oh, oh)
        b = py.col2im_nhwc(dcols, 2, 10, 10, 3, 3, 3, stride, oh, oh)
        assert (a == b).all()


@needs_cy
@pytest.mark.parametrize("window,stride", [(2, 2), (2, 1), (3, 2)])
def test_maxpool_parity_including_ties(window, stride):
    rng = np.random.default_rng(6)
    # quantized values force plenty of ties
    x = (np.round(rng.standard_normal((2, 8, 8, 5)) * 2) / 2).astype(np.float32)
    oh = (8 - window) // stride + 1
    ao, ai = cy.maxpool_fwd_nhwc(x, window, stride, oh, oh)
    bo, bi = py.maxpool_fwd_nhwc(x, window, stride, oh, oh)
    assert (ao == bo).all()
    assert (ai == bi).all()
    dy = rng.standard_normal(ao.shape).astype(np.float32)
    da = cy.maxpool_bwd_nhwc(dy, ai, 8, 8)
    db = py.maxpool_bwd_nhwc(dy, bi, 8, 8)
    assert (da == db).all()


@needs_cy
def test_bias_relu_parity():
    rng = np.random.default_rng(8)
    for apply_relu in (True, False):
        y1 = rng.standard_normal((50, 7)).astype(np.float32)
        y2 = y1.copy()
        bias = rng.standard_normal(7).astype(np.float32)
        cy.bias_relu_inplace(y1, bias, apply_relu)
        py.bias_relu_inplace(y2, bias, apply_relu)
        assert (y1 == y2).all()


@needs_cy
def test_relu_bwd_parity():
    rng = np.random.default_rng(9)
    g1 = rng.standard_normal((40, 6)).astype(np.float32)
    g2 = g1.copy()
    out = rng.standard_normal((40, 6)).astype(np.float32)
    out[out < 0.3] = 0.0  # include exact zeros
    cy.relu_bwd_inplace(g1, out)
    py.relu_bwd_inplace(g2, out)
    assert (g1 == g2).all()


@needs_cy
def test_full_model_step_bitwise_parity():
    """One forward+backward of the backbone agrees bitwise across backends."""
    import cilbench.autograd as ag
    import cilbench.model as M

    results = {}
    for backend in (py, cy):
        old = ag._kern
        ag._kern = backend
        try:
            m = M.build_backbone(M.BackboneConfig(), 123)
            M.expand_head(m, 4, np.random.default_rng(5))
            x = ag.Tensor(
                np.random.default_rng(1).standard_normal((8, 3, 32, 32)).astype(np.float32)
            )
            y = np.random.default_rng(2).integers(0, 4, 8)
            logits = M.forward(m, x)
            loss = ag.masked_softmax_cross_entropy(logits, y, np.ones(4, bool))
            ag.backward(loss)
            results[backend.NAME] = (
                logits.data.tobytes(),
                float(loss.data),
                b"".join(p.grad.tobytes() for _, p in m.named_parameters()),
            )
        finally:
            ag._kern = old
    assert results["python"][0] == results["cython"][0]
    assert results["python"][1] == results["cython"][1]
    assert results["python"][2] == results["cython"][2]
