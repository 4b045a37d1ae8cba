"""Compare the compiled kernel backend against the pure-NumPy fallback.

Times the four kernel entry points at the backbone's layer shapes, plus a
full forward+backward training step of the 5-stage model on each backend.

    python benchmarks/bench_kernels.py [--batch 64] [--repeats 10]
"""

import argparse
import time

import numpy as np

import cilbench.autograd as ag
import cilbench.model as M
from cilbench._kernels import get_backend
from cilbench.seeding import stream_rng


def timeit(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000


def bench_kernels(backend, batch, repeats):
    rng = np.random.default_rng(0)
    out = {}
    # stage-2 shapes: the heaviest conv layer
    x = rng.standard_normal((batch, 32, 32, 32)).astype(np.float32)
    cols = np.empty((batch * 32 * 32, 288), np.float32)
    out["im2col (s2)"] = timeit(lambda: backend.im2col_nhwc(x, 3, 3, 1, 32, 32, 1, cols), repeats)
    dcols = rng.standard_normal((batch * 16 * 16, 288)).astype(np.float32)
    out["col2im (s2/stride2)"] = timeit(
        lambda: backend.col2im_nhwc(dcols, batch, 34, 34, 32, 3, 3, 2, 16, 16), repeats)
    out["maxpool fwd (s2)"] = timeit(
        lambda: backend.maxpool_fwd_nhwc(x, 2, 2, 16, 16), repeats)
    _, idx = backend.maxpool_fwd_nhwc(x, 2, 2, 16, 16)
    dy = rng.standard_normal((batch, 16, 16, 32)).astype(np.float32)
    out["maxpool bwd (s2)"] = timeit(
        lambda: backend.maxpool_bwd_nhwc(dy, idx, 32, 32), repeats)
    y = rng.standard_normal((batch * 1024, 32)).astype(np.float32)
    b = rng.standard_normal(32).astype(np.float32)
    out["bias+relu (s2)"] = timeit(
        lambda: backend.bias_relu_inplace(y, b, True), repeats)
    return out


def bench_model_step(backend, batch, repeats):
    old = ag._kern
    ag._kern = backend
    try:
        m = M.build_backbone(M.BackboneConfig(), 0)
        M.expand_head(m, 6, stream_rng(0, "head-init/1"))
        x = ag.Tensor(np.random.default_rng(1).standard_normal(
            (batch, 3, 32, 32)).astype(np.float32))
        yb = np.random.default_rng(2).integers(0, 6, batch)
        mask = np.ones(6, bool)

        def step():
            logits = M.forward(m, x)
            ag.backward(ag.masked_softmax_cross_entropy(logits, yb, mask))
            m.zero_grad()

        return timeit(step, repeats)
    finally:
        ag._kern = old


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()

    backends = {"python": get_backend("python")}
    try:
        backends["cython"] = get_backend("cython")
    except ImportError:
        print("compiled backend not built; benchmarking the fallback only")

    rows = {}
    for name, backend in backends.items():
        rows[name] = bench_kernels(backend, args.batch, args.repeats)
        rows[name]["model fwd+bwd step"] = bench_model_step(backend, args.batch, args.repeats)

    labels = list(next(iter(rows.values())).keys())
    col = max(len(l) for l in labels) + 2
    header = f"{'kernel (batch ' + str(args.batch) + ')':<{col}}" + "".join(
        f"{n:>12}" for n in rows
    )
    if len(rows) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label in labels:
        line = f"{label:<{col}}"
        vals = [rows[n][label] for n in rows]
        line += "".join(f"{v:>10.2f}ms" for v in vals)
        if len(vals) == 2:
            line += f"{vals[0] / vals[1]:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
