"""Reverse-mode automatic differentiation core.

Float32 tensors on a tape: ops record nodes in creation order (so the tape
is topologically sorted by construction), `backward` walks it once in
reverse, accumulates gradients additively into `.grad`, then consumes the
tape. Deterministic: no in-place mutation of tape-tracked tensors, fixed
reduction orders everywhere.

Convolutions run as im2col + BLAS GEMM with the patch gather/scatter done
by the selected kernel backend (compiled or pure NumPy). Internally the
engine is NHWC; the public `conv2d`/`max_pool2d` ops take the NCHW layout.
"""

import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from ._kernels import active as _kern

DEBUG_CHECKS = os.environ.get("CILBENCH_DEBUG", "") == "1"


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class ContractViolation(ValueError):
    pass


class MissingGradient(RuntimeError):
    pass


class Tensor:
    """N-d float32 array with optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "update_mask", "_node")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        # Optional bool array, True where SGD may update (partial freezing).
        self.update_mask = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "bwd", "tape")

    def __init__(self, out, inputs, bwd, tape):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.tape = tape


class Tape:
    def __init__(self):
        self.nodes = []
        self.consumed = False


_active_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _active_tape


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad += g


def _accum_new(t: Tensor, g: np.ndarray):
    """Like _accum but takes ownership: `g` must be freshly allocated and
    never aliased by the caller afterwards."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _record(out: Tensor, inputs, bwd):
    global _active_tape
    if _active_tape.consumed:
        _active_tape = Tape()
    node = _Node(out, inputs, bwd, _active_tape)
    _active_tape.nodes.append(node)
    out._node = node


def _finite_check(arr):
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by forward op")


def _make(data, inputs, bwd_factory):
    """Build the output tensor and record it when gradients are live."""
    _finite_check(data)
    req = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        _record(out, inputs, bwd_factory(out))
    return out


def backward(loss: Tensor):
    """Populate grads of everything reachable from `loss`; consume the tape."""
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    node = loss._node
    if node is None:
        return  # constant loss: nothing recorded, all grads stay zero
    tape = node.tape
    if tape.consumed:
        raise TapeError("backward on a consumed tape")
    loss.grad = np.ones_like(loss.data)
    for n in reversed(tape.nodes):
        out = n.out
        # sever node->tensor so intermediates free by refcount, not gc cycles
        n.out = None
        n.inputs = ()
        if out is None or out.grad is None:
            n.bwd = None
            continue
        g = out.grad
        out.grad = None  # op outputs are never leaves
        n.bwd(g)
        n.bwd = None  # free saved activations
    tape.nodes.clear()
    tape.consumed = True


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd_factory(out):
        mask = x.data > 0

        def bwd(g):
            _accum_new(x, g * mask)

        return bwd

    return _make(data, (x,), bwd_factory)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"add shapes {a.data.shape} vs {b.data.shape}")
    data = a.data + b.data

    def bwd_factory(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g if a.data.shape == g.shape else g.sum().reshape(a.data.shape))
            if b.requires_grad:
                _accum(b, g if b.data.shape == g.shape else g.sum().reshape(b.data.shape))

        return bwd

    return _make(data, (a, b), bwd_factory)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    data = x.data * np.float32(s)

    def bwd_factory(out):
        def bwd(g):
            _accum(x, g * np.float32(s))

        return bwd

    return _make(data, (x,), bwd_factory)


def mul_const(x: Tensor, c) -> Tensor:
    """Elementwise product with a non-differentiable constant array."""
    c = np.asarray(c, dtype=np.float32)
    data = x.data * c

    def bwd_factory(out):
        def bwd(g):
            _accum_new(x, g * c)

        return bwd

    return _make(data, (x,), bwd_factory)


def sum_all(x: Tensor) -> Tensor:
    data = np.float32(x.data.sum(dtype=np.float32))

    def bwd_factory(out):
        def bwd(g):
            _accum(x, np.broadcast_to(g, x.data.shape).astype(np.float32))

        return bwd

    return _make(data, (x,), bwd_factory)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd_factory(out):
        def bwd(g):
            _accum(x, g.reshape(x.data.shape))

        return bwd

    return _make(data, (x,), bwd_factory)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat_rows trailing dims {a.data.shape} vs {b.data.shape}")
    data = np.concatenate([a.data, b.data], axis=0)
    na = a.data.shape[0]

    def bwd_factory(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g[:na])
            if b.requires_grad:
                _accum(b, g[na:])

        return bwd

    return _make(data, (a, b), bwd_factory)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[start:stop].copy()

    def bwd_factory(out):
        def bwd(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:stop] += g

        return bwd

    return _make(data, (x,), bwd_factory)


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    data = np.float32(np.mean(diff * diff, dtype=np.float32))
    n = a.data.size

    def bwd_factory(out):
        def bwd(g):
            k = g * np.float32(2.0 / n)
            if a.requires_grad:
                _accum(a, k * diff)
            if b.requires_grad:
                _accum(b, -k * diff)

        return bwd

    return _make(data, (a, b), bwd_factory)


def weighted_sse(x: Tensor, target, weight) -> Tensor:
    """sum(weight * (x - target)^2) with constant target/weight arrays.

    The logit-matching replay term: `weight` carries the per-entry averaging
    so snapshots of different widths can share one batched forward.
    """
    target = np.asarray(target, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    diff = x.data - target
    data = np.float32(np.sum(weight * diff * diff, dtype=np.float32))

    def bwd_factory(out):
        def bwd(g):
            _accum(x, g * np.float32(2.0) * weight * diff)

        return bwd

    return _make(data, (x,), bwd_factory)


def quadratic_penalty(params, anchors, omegas, lam: float) -> Tensor:
    """lam * sum_p sum(omega_p * (p - anchor_p)^2) as a single tape node."""
    lam = float(lam)
    total = 0.0
    diffs = []
    for p, a, om in zip(params, anchors, omegas):
        d = p.data - a
        diffs.append(d)
        total += float(np.sum(om * d * d, dtype=np.float64))
    data = np.float32(lam * total)

    def bwd_factory(out):
        def bwd(g):
            k = g * np.float32(2.0 * lam)
            for p, om, d in zip(params, omegas, diffs):
                if p.requires_grad:
                    _accum(p, k * om * d)

        return bwd

    return _make(data, tuple(params), bwd_factory)


def sum_of_squares(x: Tensor) -> Tensor:
    """sum(x^2): the output-norm objective for importance estimation."""
    data = np.float32(np.sum(x.data * x.data, dtype=np.float32))

    def bwd_factory(out):
        def bwd(g):
            _accum(x, g * np.float32(2.0) * x.data)

        return bwd

    return _make(data, (x,), bwd_factory)


def masked_softmax_cross_entropy(logits: Tensor, targets, class_mask) -> Tensor:
    """Mean NLL over the batch with masked-out classes treated as -inf.

    `targets` are class indices (length N), `class_mask` a length-C bool
    array; every target must be unmasked.
    """
    targets = np.asarray(targets, dtype=np.int64)
    class_mask = np.asarray(class_mask, dtype=bool)
    n, c = logits.data.shape
    if class_mask.shape != (c,):
        raise ShapeError(f"class mask length {class_mask.shape} vs {c} classes")
    if not class_mask.any():
        raise ContractViolation("all classes masked")
    if targets.shape != (n,):
        raise ShapeError(f"targets length {targets.shape[0]} vs batch {n}")
    if (targets < 0).any() or (targets >= c).any():
        raise ContractViolation("target index outside logit range")
    if not class_mask[targets].all():
        bad = targets[~class_mask[targets]][0]
        raise ContractViolation(f"target class {bad} is masked out")

    z = np.where(class_mask[None, :], logits.data, np.float32(-np.inf))
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    data = np.float32(-np.mean(logp[np.arange(n), targets], dtype=np.float32))

    def bwd_factory(out):
        probs = ez / sez  # zero at masked columns

        def bwd(g):
            gl = probs.copy()
            gl[np.arange(n), targets] -= 1.0
            _accum_new(logits, gl * (g / np.float32(n)))

        return bwd

    return _make(data, (logits,), bwd_factory)


# ---------------------------------------------------------------------------
# linear / conv / pooling

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N,F) @ w (C,F)^T + b (C,).

    Computed one output column at a time: a column's value then never
    depends on how many other rows the weight has, which makes old-class
    logits bitwise stable across head expansion.
    """
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input features {x.data.shape} incompatible with weight {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"linear: bias shape {b.data.shape} vs {w.data.shape[0]} outputs")
    n, c = x.data.shape[0], w.data.shape[0]
    ct = np.empty((c, n), dtype=np.float32)
    xc = np.ascontiguousarray(x.data)
    for j in range(c):
        np.dot(xc, w.data[j], out=ct[j])
    data = np.ascontiguousarray(ct.T)
    data += b.data

    def bwd_factory(out):
        def bwd(g):
            if x.requires_grad:
                _accum_new(x, g @ w.data)
            if w.requires_grad:
                _accum_new(w, g.T @ x.data)
            if b.requires_grad:
                _accum_new(b, g.sum(axis=0))

        return bwd

    return _make(data, (x, w, b), bwd_factory)


def _conv_out_dim(size, k, stride, pad, label):
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {label}={size + 2 * pad}")
    return span // stride + 1


class _Workspace:
    """Free-list of large scratch arrays (patch matrices). Reuse avoids
    page-fault churn on the ~100MB/step of conv workspace."""

    def __init__(self, max_per_shape=4):
        self._pool = {}
        self.max_per_shape = max_per_shape

    def take(self, shape):
        lst = self._pool.get(shape)
        if lst:
            return lst.pop()
        return np.empty(shape, dtype=np.float32)

    def give(self, arr):
        lst = self._pool.setdefault(arr.shape, [])
        if len(lst) < self.max_per_shape:
            lst.append(arr)


_ws = _Workspace()


# Patch-matrix blocks are sized to stay cache-resident through their GEMM;
# fixed block size keeps runs deterministic.
_CONV_BLOCK_ROWS = 8192


def _conv_gemm_blocked(src4, kh, kw, pad, w2, bias, fuse_relu, rows, cols_width):
    """im2col + GEMM (+bias/relu) per image chunk; returns (M, O) output.

    The patch block is reused across chunks, so the GEMM always reads a
    cache-hot operand and the full patch matrix is never materialized.
    """
    n = src4.shape[0]
    o = w2.shape[1]
    nb = max(1, _CONV_BLOCK_ROWS // rows)
    y = np.empty((n * rows, o), dtype=np.float32)
    block = _ws.take((min(nb, n) * rows, cols_width))
    oh_ow = int(np.sqrt(rows))  # spatial dims are square throughout
    for i in range(0, n, nb):
        m = min(nb, n - i)
        cb = block[: m * rows]
        _kern.im2col_nhwc(src4[i : i + m], kh, kw, 1, oh_ow, oh_ow, pad, cb)
        yb = y[i * rows : (i + m) * rows]
        np.dot(cb, w2, out=yb)
        if bias is not None:
            _kern.bias_relu_inplace(yb, bias, fuse_relu)
        elif fuse_relu:
            np.maximum(yb, 0.0, out=yb)
    _ws.give(block)
    return y


def conv2d_nhwc(x: Tensor, w: Tensor, b, stride: int = 1, padding: int = 0,
                fuse_relu: bool = False) -> Tensor:
    """Convolution in NHWC with weights (O, kh, kw, Ci).

    `fuse_relu` applies max(.,0) to the output inside the same tape node
    (one memory pass less than a separate relu op; identical math).
    """
    n, h, wd, ci = x.data.shape
    o, kh, kw, ci2 = w.data.shape
    if ci != ci2:
        raise ShapeError(f"conv2d: input channels {ci} != weight channels {ci2}")
    oh = _conv_out_dim(h, kh, stride, padding, "H")
    ow = _conv_out_dim(wd, kw, stride, padding, "W")
    kkc = kh * kw * ci

    fast = stride == 1 and oh == ow and h == wd
    if fast:
        xc = np.ascontiguousarray(x.data)
        y = _conv_gemm_blocked(
            xc, kh, kw, padding, w.data.reshape(o, -1).T,
            b.data if b is not None else None, fuse_relu, oh * ow, kkc,
        )
        cols = None
    else:
        cols = _ws.take((n * oh * ow, kkc))
        _kern.im2col_nhwc(np.ascontiguousarray(x.data), kh, kw, stride, oh, ow, padding, cols)
        y = cols @ w.data.reshape(o, -1).T
        if b is not None:
            _kern.bias_relu_inplace(y, b.data, fuse_relu)
        elif fuse_relu:
            np.maximum(y, 0.0, out=y)
    data = y.reshape(n, oh, ow, o)

    inputs = (x, w) if b is None else (x, w, b)
    recording = _grad_enabled and any(t.requires_grad for t in inputs)
    if not recording and cols is not None:
        _ws.give(cols)

    def bwd_factory(out):
        def bwd(g):
            gr = np.ascontiguousarray(g).reshape(-1, o)
            if fuse_relu:
                # g buffers are exclusively owned by this node at this point
                _kern.relu_bwd_inplace(gr, out.data.reshape(-1, o))
            rows = oh * ow
            if w.requires_grad:
                if fast:
                    # re-gather x patches per chunk: cheaper than keeping the
                    # full patch matrix alive from the forward pass
                    xc = np.ascontiguousarray(x.data)
                    nb = max(1, _CONV_BLOCK_ROWS // rows)
                    dw2 = np.zeros((kkc, o), dtype=np.float32)
                    block = _ws.take((min(nb, n) * rows, kkc))
                    for i in range(0, n, nb):
                        m = min(nb, n - i)
                        cb = block[: m * rows]
                        _kern.im2col_nhwc(xc[i : i + m], kh, kw, 1, oh, ow, padding, cb)
                        dw2 += cb.T @ gr[i * rows : (i + m) * rows]
                    _ws.give(block)
                    _accum_new(w, np.ascontiguousarray(dw2.T).reshape(w.data.shape))
                else:
                    _accum_new(w, np.ascontiguousarray((cols.T @ gr).T).reshape(w.data.shape))
            if b is not None and b.requires_grad:
                _accum_new(b, gr.sum(axis=0))
            if x.requires_grad:
                if fast:
                    # dX as a convolution of dY with the flipped kernel:
                    # avoids the wide dcols GEMM and the col2im scatter.
                    q = kh - 1 - padding
                    wf = np.ascontiguousarray(
                        w.data[:, ::-1, ::-1, :].transpose(1, 2, 0, 3)
                    ).reshape(kh * kw * o, ci)
                    dx = _conv_gemm_blocked(
                        np.ascontiguousarray(g), kh, kw, q, wf, None, False,
                        h * wd, kh * kw * o,
                    )
                    _accum_new(x, dx.reshape(n, h, wd, ci))
                else:
                    hp, wp = h + 2 * padding, wd + 2 * padding
                    dcols = gr @ w.data.reshape(o, -1)
                    dxp = _kern.col2im_nhwc(dcols, n, hp, wp, ci, kh, kw, stride, oh, ow)
                    if padding:
                        dxp = np.ascontiguousarray(
                            dxp[:, padding : padding + h, padding : padding + wd, :]
                        )
                    _accum_new(x, dxp)
            if cols is not None:
                _ws.give(cols)

        return bwd

    return _make(data, inputs, bwd_factory)


def max_pool2d_nhwc(x: Tensor, window: int, stride: int) -> Tensor:
    n, h, w, c = x.data.shape
    oh = _conv_out_dim(h, window, stride, 0, "H")
    ow = _conv_out_dim(w, window, stride, 0, "W")
    data, idx = _kern.maxpool_fwd_nhwc(
        np.ascontiguousarray(x.data), window, stride, oh, ow
    )

    def bwd_factory(out):
        def bwd(g):
            _accum_new(x, _kern.maxpool_bwd_nhwc(np.ascontiguousarray(g), idx, h, w))

        return bwd

    return _make(data, (x,), bwd_factory)


def global_avg_pool_nhwc(x: Tensor) -> Tensor:
    n, h, w, c = x.data.shape
    data = x.data.mean(axis=(1, 2), dtype=np.float32)

    def bwd_factory(out):
        def bwd(g):
            _accum(x, np.broadcast_to(g[:, None, None, :] / np.float32(h * w), x.data.shape))

        return bwd

    return _make(data, (x,), bwd_factory)


def _to_nhwc(x: Tensor) -> Tensor:
    data = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))

    def bwd_factory(out):
        def bwd(g):
            _accum_new(x, np.ascontiguousarray(g.transpose(0, 3, 1, 2)))

        return bwd

    return _make(data, (x,), bwd_factory)


def _to_nchw(x: Tensor) -> Tensor:
    data = np.ascontiguousarray(x.data.transpose(0, 3, 1, 2))

    def bwd_factory(out):
        def bwd(g):
            _accum_new(x, np.ascontiguousarray(g.transpose(0, 2, 3, 1)))

        return bwd

    return _make(data, (x,), bwd_factory)


def conv2d(x: Tensor, w: Tensor, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Spec-contract convolution: x is NCHW, w is (O, I, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[1]} != weight channels {w.data.shape[1]}"
        )
    w_nhwc = _transpose_okkc(w)
    return _to_nchw(conv2d_nhwc(_to_nhwc(x), w_nhwc, b, stride, padding))


def _transpose_okkc(w: Tensor) -> Tensor:
    data = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1))

    def bwd_factory(out):
        def bwd(g):
            _accum(w, np.ascontiguousarray(g.transpose(0, 3, 1, 2)))

        return bwd

    return _make(data, (w,), bwd_factory)


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Spec-contract max pooling: x is NCHW."""
    return _to_nchw(max_pool2d_nhwc(_to_nhwc(x), window, stride))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0,1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


class SGD:
    """v <- momentum*v + g + wd*theta; theta <- theta - lr*v; grads zeroed.

    Partial freezing: a parameter's `update_mask` (True = trainable entry)
    zeroes the velocity at frozen entries so those weights stay bitwise
    constant.
    """

    def __init__(self, named_params, config: SgdConfig):
        self.params = list(named_params)
        self.config = config
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        cfg = self.config
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradient(f"parameter {name!r} has no gradient")
            v = self.velocity[name]
            g = p.grad
            if cfg.weight_decay:
                g = g + np.float32(cfg.weight_decay) * p.data
            v *= np.float32(cfg.momentum)
            v += g
            if p.update_mask is not None:
                v *= p.update_mask
            p.data -= np.float32(cfg.learning_rate) * v
            p.grad = None

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None
