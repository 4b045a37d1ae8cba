"""Dataset container format, synthetic data, and scenario building.

CLDS1 is a little-endian binary container holding one split of one dataset:

    magic   5 bytes  b"CLDS1"
    split   u8       0 = train, 1 = test
    K       u16      class count
    K x (u16 len, utf-8 name)   class-name table
    n       u32      image count
    n x u16          labels (local class ids)
    n x 3072 bytes   images, 3x32x32, CHW byte order

The byte length must match the header arithmetic exactly. Scenarios order
episodes (a dataset, or a class subset of one) into a class-incremental
stream with a global registry assigning contiguous ids in first-appearance
order.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import stream_rng

MAGIC = b"CLDS1"
IMAGE_BYTES = 3 * 32 * 32
TRAIN_SUFFIX = ".train.clds1"
TEST_SUFFIX = ".test.clds1"


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedDatasetError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass
class DatasetFile:
    images: np.ndarray  # (n, 3, 32, 32) uint8
    labels: np.ndarray  # (n,) uint16
    class_names: list
    split: str  # "train" | "test"

    @property
    def n(self) -> int:
        return len(self.labels)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


def save_dataset(ds: DatasetFile, path):
    if ds.images.dtype != np.uint8 or ds.images.shape[1:] != (3, 32, 32):
        raise DatasetError(f"images must be uint8 (n,3,32,32), got {ds.images.shape}")
    if int(ds.labels.max(initial=0)) >= len(ds.class_names):
        raise LabelRangeError("label outside class table")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", 0 if ds.split == "train" else 1))
        f.write(struct.pack("<H", len(ds.class_names)))
        for name in ds.class_names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(struct.pack("<I", ds.n))
        f.write(ds.labels.astype("<u2").tobytes())
        f.write(np.ascontiguousarray(ds.images).tobytes())


def load_dataset(path) -> DatasetFile:
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:5]!r}")
    off = 5

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise TruncatedDatasetError(f"{path}: truncated while reading {what}")
        piece = blob[off : off + n]
        off += n
        return piece

    split = "train" if take(1, "split tag")[0] == 0 else "test"
    (k,) = struct.unpack("<H", take(2, "class count"))
    names = []
    for i in range(k):
        (ln,) = struct.unpack("<H", take(2, f"class {i} name length"))
        names.append(take(ln, f"class {i} name").decode("utf-8"))
    (n,) = struct.unpack("<I", take(4, "image count"))
    labels = np.frombuffer(take(2 * n, "labels"), dtype="<u2").copy()
    images = np.frombuffer(take(n * IMAGE_BYTES, "images"), dtype=np.uint8)
    if off != len(blob):
        raise TruncatedDatasetError(
            f"{path}: {len(blob) - off} trailing bytes beyond declared payload"
        )
    if n and int(labels.max()) >= k:
        raise LabelRangeError(f"{path}: label {int(labels.max())} outside {k}-class table")
    return DatasetFile(images.reshape(n, 3, 32, 32), labels, names, split)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    classes: int
    per_class_train: int
    per_class_test: int
    separation: float = 1.0  # larger = easier
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("synthetic datasets need at least 2 classes")
        if self.separation <= 0:
            raise ValueError("separation must be positive")


DIFFICULTY_PRESETS = {"easy": 1.5, "medium": 1.0, "hard": 0.5}


def _class_signature(spec: SynthSpec, c: int):
    # per-dataset rotation decorrelates class palettes across seeds; the
    # within-dataset spacing stays even so classes never collide
    rot = float(stream_rng(spec.seed, "synth/rotation").uniform(0, 2 * np.pi))
    rng = stream_rng(spec.seed, f"synth/class/{c}")
    theta = rot + 2 * np.pi * (c / spec.classes) + float(
        rng.uniform(0, 2 * np.pi / (8 * spec.classes))
    )
    color = 0.5 + 0.28 * min(spec.separation, 1.6) * np.array(
        [np.cos(theta), np.cos(theta + 2 * np.pi / 3), np.cos(theta + 4 * np.pi / 3)]
    )
    rngf = stream_rng(spec.seed, f"synth/freq/{c}")
    fx = 1 + (c + int(rngf.integers(0, 3))) % 3
    fy = 1 + ((c // 3) + int(rngf.integers(0, 3))) % 3
    return color, fx, fy


def synth_generate(spec: SynthSpec):
    """Procedurally textured 32x32x3 classes: a class-specific color plus a
    class-specific spatial frequency, with per-image phase and noise."""
    amp = 0.22 * spec.separation
    noise = 0.11
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    out = {}
    for split, per in (("train", spec.per_class_train), ("test", spec.per_class_test)):
        images = np.empty((spec.classes * per, 3, 32, 32), dtype=np.uint8)
        labels = np.empty(spec.classes * per, dtype=np.uint16)
        row = 0
        for c in range(spec.classes):
            rng = stream_rng(spec.seed, f"synth/{split}/{c}")
            color, fx, fy = _class_signature(spec, c)
            for _ in range(per):
                phase = rng.uniform(0, 2 * np.pi)
                pattern = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
                img = color[:, None, None] + amp * pattern[None, :, :]
                img = img + rng.normal(0.0, noise, size=(3, 32, 32))
                images[row] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
                labels[row] = c
                row += 1
        out[split] = DatasetFile(images, labels,
                                 [f"synth-{c}" for c in range(spec.classes)], split)
    return out["train"], out["test"]


def synth_write(spec: SynthSpec, out_stem) -> dict:
    """Generate and write the <stem>.train.clds1 / <stem>.test.clds1 pair
    plus a config echo; returns the echo."""
    train, test = synth_generate(spec)
    stem = str(out_stem)
    save_dataset(train, stem + TRAIN_SUFFIX)
    save_dataset(test, stem + TEST_SUFFIX)
    echo = {
        "classes": spec.classes,
        "per_class_train": spec.per_class_train,
        "per_class_test": spec.per_class_test,
        "separation": spec.separation,
        "seed": spec.seed,
        "files": [stem + TRAIN_SUFFIX, stem + TEST_SUFFIX],
    }
    with open(stem + ".synth.json", "w") as f:
        json.dump(echo, f, indent=2, sort_keys=True)
    return echo


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Episode:
    index: int  # 1-based
    dataset_stem: str
    train: DatasetFile
    test: DatasetFile
    local_classes: list  # local ids in this episode
    local_to_global: dict  # local id -> global id
    epochs: int
    _test_cache: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def new_global_ids(self):
        return sorted(self.local_to_global.values())

    def _select(self, ds: DatasetFile):
        mask = np.isin(ds.labels, self.local_classes)
        images = ds.images[mask]
        labels = ds.labels[mask]
        glob = np.array([self.local_to_global[int(l)] for l in labels], dtype=np.int64)
        return images, glob

    def train_arrays(self):
        return self._select(self.train)

    def test_arrays(self):
        return self._select(self.test)

    def test_normalized(self):
        """Normalized test split, cached: evaluation touches every past
        episode after every episode, so this is hit T times per row."""
        if self._test_cache is None:
            images, gids = self.test_arrays()
            self._test_cache = (normalize_images(images), gids)
        return self._test_cache


@dataclass
class Scenario:
    name: str
    seed: int
    episodes: list
    registry: list  # global id -> display name
    config_echo: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.registry)


DEFAULT_EPOCHS = 10


def _resolve_classes(ds: DatasetFile, wanted, stem):
    if wanted is None:
        return sorted(set(int(l) for l in ds.labels))
    out = []
    for c in wanted:
        if isinstance(c, str):
            if c not in ds.class_names:
                raise ScenarioError(f"{stem}: no class named {c!r}")
            out.append(ds.class_names.index(c))
        else:
            if not 0 <= int(c) < len(ds.class_names):
                raise ScenarioError(f"{stem}: local class id {c} out of range")
            out.append(int(c))
    return out


def build_scenario(config: dict, base_dir=".") -> Scenario:
    """Order episodes into a class-incremental stream with a global registry.

    Classes are distinct across datasets by default; `shared_classes` groups
    of class names share one global id (first appearance wins).
    """
    base = Path(base_dir)
    shared: dict[str, int] = {}
    shared_groups = config.get("shared_classes") or []
    group_of = {}
    for gi, group in enumerate(shared_groups):
        for name in group:
            group_of[name] = gi

    registry: list[str] = []
    group_gid: dict[int, int] = {}
    episodes = []
    seen_keys = set()
    split_plans: dict[str, set] = {}

    for i, ep_cfg in enumerate(config.get("episodes", []), start=1):
        stem = ep_cfg["dataset"]
        stem_path = base / stem
        train_path = Path(str(stem_path) + TRAIN_SUFFIX)
        test_path = Path(str(stem_path) + TEST_SUFFIX)
        if not train_path.exists() or not test_path.exists():
            raise ScenarioError(f"episode {i}: dataset files for {stem!r} not found")
        train = load_dataset(train_path)
        test = load_dataset(test_path)
        local = _resolve_classes(train, ep_cfg.get("classes"), stem)
        plan = split_plans.setdefault(stem, set())
        overlap = plan.intersection(local)
        if overlap:
            raise ScenarioError(
                f"episode {i}: classes {sorted(overlap)} of {stem!r} already used by an earlier episode"
            )
        plan.update(local)

        mapping = {}
        for lc in local:
            name = train.class_names[lc]
            gi = group_of.get(name)
            if gi is not None:
                if gi in group_gid:
                    mapping[lc] = group_gid[gi]
                    continue
            key = (stem, lc)
            if key in seen_keys:
                raise ScenarioError(f"episode {i}: duplicate class {key}")
            seen_keys.add(key)
            gid = len(registry)
            registry.append(name)
            mapping[lc] = gid
            if gi is not None:
                group_gid[gi] = gid
        episodes.append(
            Episode(
                index=i,
                dataset_stem=stem,
                train=train,
                test=test,
                local_classes=local,
                local_to_global=mapping,
                epochs=int(ep_cfg.get("epochs", config.get("epochs", DEFAULT_EPOCHS))),
            )
        )

    if not episodes:
        raise ScenarioError("scenario has no episodes")
    return Scenario(
        name=config.get("name", "scenario"),
        seed=int(config.get("seed", 0)),
        episodes=episodes,
        registry=registry,
        config_echo=config,
    )


# ---------------------------------------------------------------------------
# batch iteration

NORM_MEAN = 0.5
NORM_STD = 0.5


def normalize_images(raw_u8: np.ndarray) -> np.ndarray:
    """bytes -> [0,1] -> per-channel standardization with fixed constants."""
    x = raw_u8.astype(np.float32) / np.float32(255.0)
    x -= np.float32(NORM_MEAN)
    x /= np.float32(NORM_STD)
    return x


def iterate_batches(images: np.ndarray, labels: np.ndarray, batch_size: int,
                    rng: np.random.Generator | None = None):
    """Yield (float32 normalized batch, int64 global labels); seeded shuffle
    when an rng is given, file order otherwise; final partial batch kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(labels)
    if n == 0:
        raise ScenarioError("empty episode")
    order = np.arange(n)
    if rng is not None:
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        yield normalize_images(images[sel]), labels[sel].astype(np.int64)
