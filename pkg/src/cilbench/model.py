"""The shared backbone: five conv stages plus one expandable linear head.

Channel plan [32,32,64,64,128], all 3x3 stride-1 pad-1, max-pool 2x2 after
stages 2 and 4, global average pool after stage 5, head 128 -> C over the
global class registry. The head starts empty (C=0) and grows as classes
appear; old rows are preserved bitwise across expansions.

Weights are stored in (O, kh, kw, Ci) layout to match the NHWC engine.
"""

import base64
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .seeding import stream_rng

CHECKPOINT_MAGIC = b"CLCKPT1"


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    in_size: int = 32
    channels: tuple = (32, 32, 64, 64, 128)
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool_after: tuple = (2, 4)
    pool_window: int = 2
    pool_stride: int = 2

    @property
    def feature_width(self) -> int:
        return self.channels[-1]


def stage_output_shape(config: BackboneConfig, split: int):
    """(C, H, W) after stage `split` (including its trailing pool); split=5
    is the post-GAP vector reported as (C, 1, 1)."""
    if not 1 <= split <= len(config.channels):
        raise ValueError(f"split index {split} outside 1..{len(config.channels)}")
    size = config.in_size
    for s in range(1, split + 1):
        size = (size + 2 * config.padding - config.kernel) // config.stride + 1
        if s in config.pool_after:
            size = (size - config.pool_window) // config.pool_stride + 1
    if split == len(config.channels):
        return (config.channels[-1], 1, 1)
    return (config.channels[split - 1], size, size)


def feature_dim(config: BackboneConfig, split: int) -> int:
    c, h, w = stage_output_shape(config, split)
    return c * h * w


class Model:
    def __init__(self, config: BackboneConfig):
        self.config = config
        self.conv_w: list[ag.Tensor] = []
        self.conv_b: list[ag.Tensor] = []
        self.head_w = ag.Tensor(np.zeros((0, config.feature_width), np.float32),
                                requires_grad=True, name="head.w")
        self.head_b = ag.Tensor(np.zeros((0,), np.float32),
                                requires_grad=True, name="head.b")
        self.class_count = 0
        self.feature_split = 4
        self.frozen_prefix: int | None = None
        # per-stage output-unit masks, True = unit active
        self.unit_masks = [np.ones(c, dtype=bool) for c in config.channels]

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            yield f"conv{i}.w", w
            yield f"conv{i}.b", b
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def trainable_parameters(self):
        frozen = self.frozen_prefix or 0
        for name, p in self.named_parameters():
            if name.startswith("conv") and int(name[4]) <= frozen:
                continue
            yield name, p

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def checksum(self) -> int:
        import zlib

        acc = 0
        for _, p in self.named_parameters():
            acc = zlib.crc32(p.data.tobytes(), acc)
        return acc

    def clone(self) -> "Model":
        m = Model(self.config)
        m.conv_w = [ag.Tensor(w.data.copy(), requires_grad=True, name=w.name) for w in self.conv_w]
        m.conv_b = [ag.Tensor(b.data.copy(), requires_grad=True, name=b.name) for b in self.conv_b]
        m.head_w = ag.Tensor(self.head_w.data.copy(), requires_grad=True, name="head.w")
        m.head_b = ag.Tensor(self.head_b.data.copy(), requires_grad=True, name="head.b")
        m.class_count = self.class_count
        m.feature_split = self.feature_split
        m.frozen_prefix = self.frozen_prefix
        m.unit_masks = [u.copy() for u in self.unit_masks]
        for (_, a), (_, b) in zip(self.named_parameters(), m.named_parameters()):
            if a.update_mask is not None:
                b.update_mask = a.update_mask.copy()
        return m

    # -- forward ------------------------------------------------------------

    def _run_stages(self, x: ag.Tensor, upto: int, conn_masks=None, start: int = 1) -> ag.Tensor:
        cfg = self.config
        for s in range(start, upto + 1):
            w, b = self.conv_w[s - 1], self.conv_b[s - 1]
            if conn_masks is not None and f"conv{s}.w" in conn_masks:
                w = ag.mul_const(w, conn_masks[f"conv{s}.w"])
            x = ag.conv2d_nhwc(x, w, b, cfg.stride, cfg.padding, fuse_relu=True)
            if not self.unit_masks[s - 1].all():
                x = ag.mul_const(x, self.unit_masks[s - 1].astype(np.float32))
            if s in cfg.pool_after:
                x = ag.max_pool2d_nhwc(x, cfg.pool_window, cfg.pool_stride)
        return x


def build_backbone(config: BackboneConfig, seed: int) -> Model:
    """He fan-in initialization from the seeded stream; empty head."""
    rng = stream_rng(seed, "init")
    m = Model(config)
    ci = config.in_channels
    for i, co in enumerate(config.channels, start=1):
        fan_in = ci * config.kernel * config.kernel
        w = rng.standard_normal((co, config.kernel, config.kernel, ci)).astype(np.float32)
        w *= np.float32(np.sqrt(2.0 / fan_in))
        m.conv_w.append(ag.Tensor(w, requires_grad=True, name=f"conv{i}.w"))
        m.conv_b.append(ag.Tensor(np.zeros(co, np.float32), requires_grad=True, name=f"conv{i}.b"))
        ci = co
    return m


def _check_input(model: Model, batch: ag.Tensor):
    cfg = model.config
    want = (cfg.in_channels, cfg.in_size, cfg.in_size)
    if batch.data.ndim != 4 or batch.data.shape[1:] != want:
        raise ag.ShapeError(
            f"forward expects N x {want[0]} x {want[1]} x {want[2]} input, got {batch.data.shape}"
        )


def forward(model: Model, batch: ag.Tensor, mode: str = "train",
            conn_masks=None) -> ag.Tensor:
    """Logits over all registered global classes. `mode` is accepted for
    interface parity; the architecture has no mode-dependent layers."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if model.class_count < 1:
        raise ag.ShapeError("forward before any class was registered (empty head)")
    _check_input(model, batch)
    x = ag._to_nhwc(batch)
    x = model._run_stages(x, len(model.config.channels), conn_masks)
    feats = ag.global_avg_pool_nhwc(x)
    return ag.linear(feats, model.head_w, model.head_b)


def forward_from_features(model: Model, feats: ag.Tensor, split: int,
                          conn_masks=None) -> ag.Tensor:
    """Run the suffix (stages > split, GAP, head) on flattened stage-`split`
    activations: the latent-rehearsal training path."""
    cfg = model.config
    c, h, w = stage_output_shape(cfg, split)
    n = feats.data.shape[0]
    if feats.data.shape != (n, c * h * w):
        raise ag.ShapeError(f"features shape {feats.data.shape} vs expected width {c * h * w}")
    if split == len(cfg.channels):
        x = ag.reshape(feats, (n, c))
        return ag.linear(x, model.head_w, model.head_b)
    x = ag.reshape(feats, (n, h, w, c))
    x = model._run_stages(x, len(cfg.channels), conn_masks, start=split + 1)
    feats5 = ag.global_avg_pool_nhwc(x)
    return ag.linear(feats5, model.head_w, model.head_b)


def expand_head(model: Model, new_classes: int, rng: np.random.Generator):
    """Grow the head by `new_classes` rows. Old rows/bias are preserved
    bitwise; new rows are drawn at scale 0.01 to limit logit shock."""
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    f = model.config.feature_width
    new_w = (rng.standard_normal((new_classes, f)) * 0.01).astype(np.float32)
    model.head_w = ag.Tensor(
        np.concatenate([model.head_w.data, new_w], axis=0),
        requires_grad=True, name="head.w",
    )
    model.head_b = ag.Tensor(
        np.concatenate([model.head_b.data, np.zeros(new_classes, np.float32)]),
        requires_grad=True, name="head.b",
    )
    model.class_count += new_classes
    return model


def extract_features(model: Model, batch: ag.Tensor, split: int) -> np.ndarray:
    """Flattened activations after stage `split` (incl. its pool; split=5 is
    post-GAP). Not recorded on the tape: this is the rehearsal storage path."""
    cfg = model.config
    if not 1 <= split <= len(cfg.channels):
        raise ValueError(f"split index {split} outside 1..{len(cfg.channels)}")
    _check_input(model, batch)
    with ag.no_grad():
        x = ag._to_nhwc(batch)
        x = model._run_stages(x, split)
        if split == len(cfg.channels):
            return ag.global_avg_pool_nhwc(x).data
        n = x.data.shape[0]
        return x.data.reshape(n, -1).copy()


def freeze_prefix(model: Model, split: int):
    """Exclude stages <= split from optimizer updates."""
    if not 1 <= split <= len(model.config.channels):
        raise ValueError(f"split index {split} outside 1..{len(model.config.channels)}")
    model.frozen_prefix = split
    return model


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(model: Model, path, class_registry=None, extra=None):
    header = {
        "config": {
            "in_channels": model.config.in_channels,
            "in_size": model.config.in_size,
            "channels": list(model.config.channels),
            "kernel": model.config.kernel,
            "stride": model.config.stride,
            "padding": model.config.padding,
            "pool_after": list(model.config.pool_after),
            "pool_window": model.config.pool_window,
            "pool_stride": model.config.pool_stride,
        },
        "class_count": model.class_count,
        "class_registry": list(class_registry) if class_registry is not None else [],
        "feature_split": model.feature_split,
        "frozen_prefix": model.frozen_prefix,
        "unit_masks": [base64.b64encode(np.packbits(u).tobytes()).decode() for u in model.unit_masks],
        "layers": [[name, list(p.data.shape)] for name, p in model.named_parameters()],
        "weight_layout": "OKKC",
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in model.named_parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg = BackboneConfig(
            in_channels=header["config"]["in_channels"],
            in_size=header["config"]["in_size"],
            channels=tuple(header["config"]["channels"]),
            kernel=header["config"]["kernel"],
            stride=header["config"]["stride"],
            padding=header["config"]["padding"],
            pool_after=tuple(header["config"]["pool_after"]),
            pool_window=header["config"]["pool_window"],
            pool_stride=header["config"]["pool_stride"],
        )
        m = Model(cfg)
        for i in range(len(cfg.channels)):
            m.conv_w.append(ag.Tensor(np.zeros(1, np.float32), requires_grad=True, name=f"conv{i+1}.w"))
            m.conv_b.append(ag.Tensor(np.zeros(1, np.float32), requires_grad=True, name=f"conv{i+1}.b"))
        params = dict(m.named_parameters())
        for name, shape in header["layers"]:
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * 4)
            if len(raw) != n * 4:
                raise ValueError("truncated checkpoint payload")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            params[name].data = arr
        m.class_count = header["class_count"]
        m.feature_split = header["feature_split"]
        m.frozen_prefix = header["frozen_prefix"]
        m.unit_masks = [
            np.unpackbits(
                np.frombuffer(base64.b64decode(s), dtype=np.uint8), count=c
            ).astype(bool)
            for s, c in zip(header["unit_masks"], cfg.channels)
        ]
        return m, header
