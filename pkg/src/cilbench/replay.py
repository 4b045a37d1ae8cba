"""Fixed-capacity rehearsal storage and the product-quantization codec.

The buffer keeps a uniform reservoir sample of the stream: item t (1-based)
is kept with probability M/t, replacing a uniformly drawn slot. Items carry
either raw image bytes or quantized latent codes, plus an optional logit
snapshot tagged with the global class ids that existed when it was taken.

The PQ codec splits a feature vector into m subspaces and stores one byte
per subspace (k <= 256 centroids, trained per subspace by seeded k-means).
"""

import base64
import json
from dataclasses import dataclass

import numpy as np


class ReplayError(ValueError):
    pass


@dataclass
class ReplayItem:
    payload: np.ndarray  # uint8: raw CHW image bytes, or m code bytes
    kind: str  # "raw" | "latent"
    label: int
    episode: int
    logits: np.ndarray | None = None  # float32 snapshot
    logit_classes: np.ndarray | None = None  # global ids the snapshot covers

    def __post_init__(self):
        if self.kind not in ("raw", "latent"):
            raise ReplayError(f"unknown payload kind {self.kind!r}")


class ReservoirBuffer:
    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.items: list[ReplayItem] = []
        self.stream_count = 0

    def __len__(self):
        return len(self.items)


def reservoir_insert(buffer: ReservoirBuffer, item: ReplayItem, rng: np.random.Generator):
    """Offer one item; keeps the reservoir a uniform sample of the stream."""
    if buffer.capacity == 0:
        buffer.stream_count += 1
        return buffer
    if len(buffer.items) < buffer.capacity:
        buffer.items.append(item)
    else:
        j = int(rng.integers(0, buffer.stream_count + 1))
        if j < buffer.capacity:
            buffer.items[j] = item
    buffer.stream_count += 1
    return buffer


def sample_batch(buffer: ReservoirBuffer, count: int, rng: np.random.Generator):
    """Uniform with replacement."""
    if not buffer.items:
        raise ReplayError("cannot sample from an empty buffer")
    if count == 0:
        return []
    picks = rng.integers(0, len(buffer.items), size=count)
    return [buffer.items[int(i)] for i in picks]


def dump_jsonl(buffer: ReservoirBuffer, path):
    """Debug export: one JSON object per line, payload base64."""
    with open(path, "w") as f:
        for it in buffer.items:
            rec = {
                "kind": it.kind,
                "label": it.label,
                "episode": it.episode,
                "payload_b64": base64.b64encode(it.payload.tobytes()).decode(),
            }
            if it.logits is not None:
                rec["logits"] = [float(v) for v in it.logits]
                rec["logit_classes"] = [int(c) for c in it.logit_classes]
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# product quantization


@dataclass
class PQCodebook:
    m: int
    k: int
    dim: int
    centroids: np.ndarray  # (m, k, dim/m) float32
    sse_history: list  # per-iteration total SSE (float64), assignment-time
    final_sse: float  # SSE of training data against the stored centroids
    n_train: int

    @property
    def subdim(self) -> int:
        return self.dim // self.m


def _kmeans_pp_init(x, k, rng):
    """k-means++ seeding in float64."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centers[0] = x[first]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centers
            centers[j] = x[int(rng.integers(0, n))]
            continue
        r = rng.uniform(0, total)
        idx = int(np.searchsorted(np.cumsum(d2), r))
        idx = min(idx, n - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign(x, centers):
    """Nearest centroid per row (squared euclidean, lowest index on ties)."""
    # ||x-c||^2 = ||x||^2 - 2 x.c + ||c||^2 ; ||x||^2 constant per row
    cross = x @ centers.T
    c2 = (centers**2).sum(axis=1)
    scores = c2[None, :] - 2.0 * cross
    assign = scores.argmin(axis=1)
    d2 = (x**2).sum(axis=1) + scores[np.arange(len(x)), assign]
    return assign, np.maximum(d2, 0.0)


def pq_train(features: np.ndarray, m: int, k: int, iterations: int,
             rng: np.random.Generator) -> PQCodebook:
    """Per-subspace Lloyd k-means with k-means++ seeding; empty clusters are
    re-seeded to the farthest point. Internals run in float64; the stored
    table is float32 and `final_sse` is computed against it."""
    n, dim = features.shape
    if dim % m != 0:
        raise ReplayError(f"feature dim {dim} not divisible by m={m}")
    if k > 256:
        raise ReplayError("k must fit one byte (<= 256)")
    if n < k:
        raise ReplayError(f"need at least k={k} training vectors, got {n}")
    sub = dim // m
    table = np.empty((m, k, sub), dtype=np.float32)
    sse_history = []
    feats64 = features.astype(np.float64)
    for s in range(m):
        x = feats64[:, s * sub : (s + 1) * sub]
        centers = _kmeans_pp_init(x, k, rng)
        for _ in range(iterations):
            assign, d2 = _assign(x, centers)
            sse_history.append(float(d2.sum()))
            d2 = d2.copy()
            for j in range(k):
                sel = assign == j
                if sel.any():
                    centers[j] = x[sel].mean(axis=0)
                else:
                    far = int(d2.argmax())
                    centers[j] = x[far]
                    d2[far] = 0.0  # don't hand the same point to two empty clusters
        table[s] = centers.astype(np.float32)
    cb = PQCodebook(m=m, k=k, dim=dim, centroids=table,
                    sse_history=sse_history, final_sse=0.0, n_train=n)
    codes = pq_encode(cb, features)
    recon = pq_decode(cb, codes)
    cb.final_sse = float(((features.astype(np.float64) - recon.astype(np.float64)) ** 2).sum())
    return cb


def pq_encode(cb: PQCodebook, features: np.ndarray) -> np.ndarray:
    """(F,) -> (m,) codes, or (N,F) -> (N,m)."""
    single = features.ndim == 1
    x = features[None, :] if single else features
    if x.shape[1] != cb.dim:
        raise ReplayError(f"feature dim {x.shape[1]} != codebook dim {cb.dim}")
    sub = cb.subdim
    codes = np.empty((x.shape[0], cb.m), dtype=np.uint8)
    for s in range(cb.m):
        part = x[:, s * sub : (s + 1) * sub].astype(np.float64)
        assign, _ = _assign(part, cb.centroids[s].astype(np.float64))
        codes[:, s] = assign.astype(np.uint8)
    return codes[0] if single else codes


def pq_decode(cb: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """(m,) codes -> (F,) floats, or (N,m) -> (N,F)."""
    single = codes.ndim == 1
    c = codes[None, :] if single else codes
    if c.shape[1] != cb.m:
        raise ReplayError(f"code length {c.shape[1]} != m={cb.m}")
    if (c >= cb.k).any():
        raise ReplayError(f"code value {int(c.max())} out of range for k={cb.k}")
    out = np.empty((c.shape[0], cb.dim), dtype=np.float32)
    sub = cb.subdim
    for s in range(cb.m):
        out[:, s * sub : (s + 1) * sub] = cb.centroids[s][c[:, s]]
    return out[0] if single else out
