"""The training strategies behind one dispatcher.

Sequential variants (naive-sequential, MAS, MAS+r, DER, DER++, REMIND,
NISPA) share the episode loop; joint and naive-independent restructure the
run itself and are handled by `run_scenario`.

Equivalence contracts that shape the implementation:
  - DER++ with beta=0 is bitwise DER (one shared code path, one buffer
    sample serving both replay terms).
  - Any of {mas, mas_r, der, derpp} with lambda=alpha=beta=0 and capacity 0
    produces the naive-sequential parameter trajectory bitwise: replay and
    regularization terms are skipped entirely when inert, and every rng
    consumer draws from its own named stream.
"""

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from . import model as mdl
from . import replay as rp
from .data import Episode, Scenario, iterate_batches, normalize_images
from .seeding import SeedStreams

VARIANTS = (
    "naive_sequential",
    "naive_independent",
    "joint",
    "mas",
    "mas_r",
    "der",
    "derpp",
    "remind",
    "nispa",
)


class StrategyError(ValueError):
    pass


@dataclass
class StrategyConfig:
    variant: str = "naive_sequential"
    buffer_capacity: int = 200
    der_alpha: float = 0.5
    der_beta: float = 0.5
    mas_lambda: float = 0.1
    replay_ratio: float = 1.0
    selection: str = "reservoir"  # or "max_entropy"
    remind_split: int = 4
    remind_m: int = 32
    remind_k: int = 256
    remind_iterations: int = 25
    nispa_sparsity: float = 0.5
    nispa_rewire_fraction: float = 0.1
    nispa_stable_quantile: float = 0.9

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise StrategyError(f"unknown variant {self.variant!r}")
        if self.variant == "der":
            self.der_beta = 0.0  # beta > 0 is what makes it DER++
        for name in ("der_alpha", "der_beta", "mas_lambda", "replay_ratio"):
            if getattr(self, name) < 0:
                raise StrategyError(f"{name} must be >= 0")
        if self.selection not in ("reservoir", "max_entropy"):
            raise StrategyError(f"unknown selection {self.selection!r}")
        if self.buffer_capacity < 0:
            raise StrategyError("buffer_capacity must be >= 0")


@dataclass
class TrainState:
    omega: dict = field(default_factory=dict)  # per-parameter importance
    anchor: dict = field(default_factory=dict)  # parameter snapshot
    buffer: rp.ReservoirBuffer | None = None
    codebook: rp.PQCodebook | None = None
    conn_masks: dict | None = None  # NISPA connection masks
    frozen_units: list | None = None  # NISPA per-stage frozen output units
    episodes_completed: int = 0


def _batch_tensor(x: np.ndarray) -> ag.Tensor:
    return ag.Tensor(x)


def _seen_mask(model) -> np.ndarray:
    return np.ones(model.class_count, dtype=bool)


def _entropy(logits: np.ndarray) -> float:
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _buffer_offer(cfg: StrategyConfig, buffer, item, rng):
    if cfg.selection == "reservoir":
        rp.reservoir_insert(buffer, item, rng)
        return
    # keep the highest-predictive-entropy items on overflow
    if item.logits is None:
        raise StrategyError("max_entropy selection needs logit snapshots")
    if buffer.capacity == 0:
        buffer.stream_count += 1
        return
    if len(buffer.items) < buffer.capacity:
        buffer.items.append(item)
    else:
        ents = [_entropy(it.logits) for it in buffer.items]
        weakest = int(np.argmin(ents))
        if _entropy(item.logits) > ents[weakest]:
            buffer.items[weakest] = item
    buffer.stream_count += 1


def _replay_arrays(items):
    """Stack raw replay payloads back into a normalized batch."""
    raw = np.stack([it.payload.reshape(3, 32, 32) for it in items])
    labels = np.array([it.label for it in items], dtype=np.int64)
    return normalize_images(raw), labels


def _snapshot_targets(items, class_count):
    """Scatter index-tagged logit snapshots into (R, C) target and weight
    arrays; weights average per item then across items."""
    r = len(items)
    z = np.zeros((r, class_count), dtype=np.float32)
    wgt = np.zeros((r, class_count), dtype=np.float32)
    for i, it in enumerate(items):
        cls = it.logit_classes
        z[i, cls] = it.logits
        wgt[i, cls] = 1.0 / (len(cls) * r)
    return z, wgt


# ---------------------------------------------------------------------------
# sequential strategies


class SequentialStrategy:
    """Shared episode loop; subclasses override the step loss and the
    episode-end hook."""

    uses_buffer = False

    def __init__(self, cfg: StrategyConfig):
        self.cfg = cfg

    def init_state(self, model) -> TrainState:
        return TrainState(buffer=rp.ReservoirBuffer(self.cfg.buffer_capacity))

    def begin_episode(self, model, state, episode, streams):
        pass

    def train_episode(self, model, state, episode: Episode, opt_cfg: ag.SgdConfig,
                      streams: SeedStreams, log=None):
        images, labels = episode.train_arrays()
        sgd = ag.SGD(model.trainable_parameters(), opt_cfg)
        epoch_losses = []
        for epoch in range(episode.epochs):
            rng = streams.rng(f"shuffle/ep{episode.index}/epoch{epoch}")
            losses = []
            for xb, yb in iterate_batches(images, labels, opt_cfg.batch_size, rng):
                loss = self.step(model, state, xb, yb, streams)
                ag.backward(loss)
                sgd.step()
                losses.append(float(loss.data))
            epoch_losses.append(float(np.mean(losses)))
            if log:
                log(f"episode {episode.index} epoch {epoch + 1}/{episode.epochs} "
                    f"loss {epoch_losses[-1]:.4f}")
        self.end_episode(model, state, episode, streams)
        state.episodes_completed = episode.index
        return epoch_losses

    def step(self, model, state, xb, yb, streams) -> ag.Tensor:
        logits = mdl.forward(model, _batch_tensor(xb))
        return ag.masked_softmax_cross_entropy(logits, yb, _seen_mask(model))

    def end_episode(self, model, state, episode, streams):
        pass


class NaiveSequential(SequentialStrategy):
    pass


class MAS(SequentialStrategy):
    """Quadratic penalty lambda * sum Omega (theta - theta*)^2; Omega
    accumulated at episode end from per-sample |d||f(x)||^2 / d theta|."""

    replay = False

    def _penalty_parts(self, model, state):
        params, anchors, omegas = [], [], []
        for name, p in model.named_parameters():
            om = state.omega.get(name)
            if om is None:
                continue
            an = state.anchor[name]
            if om.shape != p.data.shape:
                # head grew since the snapshot: new rows are unconstrained
                grown = np.zeros_like(p.data)
                grown[tuple(slice(0, s) for s in om.shape)] = om
                om = grown
                grown_a = np.zeros_like(p.data)
                grown_a[tuple(slice(0, s) for s in an.shape)] = an
                an = grown_a
                state.omega[name] = om
                state.anchor[name] = an
            params.append(p)
            anchors.append(an)
            omegas.append(om)
        return params, anchors, omegas

    def step(self, model, state, xb, yb, streams):
        r = int(round(self.cfg.replay_ratio * len(yb)))
        replaying = self.replay and state.buffer is not None and len(state.buffer) > 0 and r > 0
        if replaying:
            items = rp.sample_batch(state.buffer, r, streams.persistent("replay"))
            xr, yr = _replay_arrays(items)
            both = _batch_tensor(np.concatenate([xb, xr]))
            logits = mdl.forward(model, both)
            cur = ag.slice_rows(logits, 0, len(yb))
            rep = ag.slice_rows(logits, len(yb), len(yb) + r)
            loss = ag.masked_softmax_cross_entropy(cur, yb, _seen_mask(model))
            loss = ag.add(loss, ag.masked_softmax_cross_entropy(rep, yr, _seen_mask(model)))
        else:
            logits = mdl.forward(model, _batch_tensor(xb))
            loss = ag.masked_softmax_cross_entropy(logits, yb, _seen_mask(model))
        if self.cfg.mas_lambda > 0 and state.omega:
            params, anchors, omegas = self._penalty_parts(model, state)
            if params:
                loss = ag.add(loss, ag.quadratic_penalty(
                    params, anchors, omegas, self.cfg.mas_lambda))
        return loss

    def end_episode(self, model, state, episode, streams):
        accumulate_importance(model, state, episode)
        if self.replay:
            rng = streams.persistent("reservoir")
            images, labels = episode.train_arrays()
            for i in range(len(labels)):
                item = rp.ReplayItem(
                    payload=images[i].copy(), kind="raw",
                    label=int(labels[i]), episode=episode.index)
                _buffer_offer(self.cfg, state.buffer, item, rng)


class MASReplay(MAS):
    replay = True


def accumulate_importance(model, state, episode: Episode):
    """Omega_p += mean over samples of |d ||f(x)||^2 / dp| (one pass over
    the episode's training data, one sample at a time for exact per-sample
    absolute values); theta* snapshots the current parameters."""
    images, labels = episode.train_arrays()
    n = len(labels)
    if n == 0:
        raise StrategyError("importance pass over an empty episode")
    sums = {name: np.zeros_like(p.data) for name, p in model.named_parameters()}
    model.zero_grad()
    for i in range(n):
        xb = normalize_images(images[i : i + 1])
        logits = mdl.forward(model, _batch_tensor(xb))
        ag.backward(ag.sum_of_squares(logits))
        for name, p in model.named_parameters():
            if p.grad is not None:
                np.add(sums[name], np.abs(p.grad), out=sums[name])
            p.grad = None
    for name, p in model.named_parameters():
        add = sums[name] / np.float32(n)
        if name in state.omega and state.omega[name].shape == add.shape:
            state.omega[name] = state.omega[name] + add
        elif name in state.omega:
            grown = np.zeros_like(add)
            old = state.omega[name]
            grown[tuple(slice(0, s) for s in old.shape)] = old
            state.omega[name] = grown + add
        else:
            state.omega[name] = add
        state.anchor[name] = p.data.copy()


class DER(SequentialStrategy):
    """CE on the current batch plus logit-matching (alpha) and replay-CE
    (beta) on one shared buffer sample; beta=0 is plain DER."""

    uses_buffer = True

    def step(self, model, state, xb, yb, streams):
        alpha, beta = self.cfg.der_alpha, self.cfg.der_beta
        r = int(round(self.cfg.replay_ratio * len(yb)))
        replaying = len(state.buffer) > 0 and (alpha > 0 or beta > 0) and r > 0
        if replaying:
            items = rp.sample_batch(state.buffer, r, streams.persistent("replay"))
            xr, yr = _replay_arrays(items)
            both = _batch_tensor(np.concatenate([xb, xr]))
            logits = mdl.forward(model, both)
            cur = ag.slice_rows(logits, 0, len(yb))
            loss = ag.masked_softmax_cross_entropy(cur, yb, _seen_mask(model))
            rep = ag.slice_rows(logits, len(yb), len(yb) + r)
            if alpha > 0:
                z, wgt = _snapshot_targets(items, model.class_count)
                loss = ag.add(loss, ag.scale(ag.weighted_sse(rep, z, wgt), alpha))
            if beta > 0:
                loss = ag.add(loss, ag.scale(
                    ag.masked_softmax_cross_entropy(rep, yr, _seen_mask(model)), beta))
            self._pending = (xb, yb, cur.data[: len(yb)].copy())
        else:
            logits = mdl.forward(model, _batch_tensor(xb))
            loss = ag.masked_softmax_cross_entropy(logits, yb, _seen_mask(model))
            self._pending = (xb, yb, logits.data.copy())
        return loss

    def train_episode(self, model, state, episode, opt_cfg, streams, log=None):
        images, labels = episode.train_arrays()
        sgd = ag.SGD(model.trainable_parameters(), opt_cfg)
        epoch_losses = []
        res_rng = streams.persistent("reservoir")
        raw_lookup = images  # insertion stores raw bytes, not normalized floats
        for epoch in range(episode.epochs):
            rng = streams.rng(f"shuffle/ep{episode.index}/epoch{epoch}")
            losses = []
            order = rng.permutation(len(labels))
            bs = opt_cfg.batch_size
            for start in range(0, len(labels), bs):
                sel = order[start : start + bs]
                xb = normalize_images(raw_lookup[sel])
                yb = labels[sel].astype(np.int64)
                loss = self.step(model, state, xb, yb, streams)
                ag.backward(loss)
                sgd.step()
                losses.append(float(loss.data))
                # offer the current batch with its live logit snapshots
                _, _, snap = self._pending
                cls = np.arange(model.class_count)
                for row, src in enumerate(sel):
                    item = rp.ReplayItem(
                        payload=raw_lookup[src].copy(), kind="raw",
                        label=int(yb[row]), episode=episode.index,
                        logits=snap[row].copy(), logit_classes=cls)
                    _buffer_offer(self.cfg, state.buffer, item, res_rng)
            epoch_losses.append(float(np.mean(losses)))
            if log:
                log(f"episode {episode.index} epoch {epoch + 1}/{episode.epochs} "
                    f"loss {epoch_losses[-1]:.4f}")
        self.end_episode(model, state, episode, streams)
        state.episodes_completed = episode.index
        return epoch_losses


class DERpp(DER):
    pass  # beta > 0 is the only difference, carried by the config


class REMIND(SequentialStrategy):
    """Episode 1 trains the whole model, then the prefix is frozen and a PQ
    codebook is trained on episode-1 features; later episodes train the
    suffix on fresh latents mixed with decoded rehearsal latents."""

    uses_buffer = True

    def train_episode(self, model, state, episode, opt_cfg, streams, log=None):
        cfg = self.cfg
        if episode.index == 1:
            out = super().train_episode(model, state, episode, opt_cfg, streams, log)
            mdl.freeze_prefix(model, cfg.remind_split)
            model.feature_split = cfg.remind_split
            self._train_codebook(model, state, episode, streams)
            return out
        if state.codebook is None:
            raise StrategyError("REMIND reached episode >= 2 without a codebook")
        return self._latent_episode(model, state, episode, opt_cfg, streams, log)

    def _features_of(self, model, images, split, batch=512):
        feats = []
        for start in range(0, len(images), batch):
            xb = normalize_images(images[start : start + batch])
            feats.append(mdl.extract_features(model, _batch_tensor(xb), split))
        return np.concatenate(feats, axis=0)

    def _train_codebook(self, model, state, episode, streams):
        cfg = self.cfg
        images, labels = episode.train_arrays()
        feats = self._features_of(model, images, cfg.remind_split)
        state.codebook = rp.pq_train(
            feats, cfg.remind_m, cfg.remind_k, cfg.remind_iterations,
            streams.rng("codebook"))
        codes = rp.pq_encode(state.codebook, feats)
        rng = streams.persistent("reservoir")
        for i in range(len(labels)):
            item = rp.ReplayItem(payload=codes[i].copy(), kind="latent",
                                 label=int(labels[i]), episode=episode.index)
            _buffer_offer(cfg, state.buffer, item, rng)

    def _latent_episode(self, model, state, episode, opt_cfg, streams, log):
        cfg = self.cfg
        images, labels = episode.train_arrays()
        sgd = ag.SGD(model.trainable_parameters(), opt_cfg)
        res_rng = streams.persistent("reservoir")
        rep_rng = streams.persistent("replay")
        epoch_losses = []
        for epoch in range(episode.epochs):
            rng = streams.rng(f"shuffle/ep{episode.index}/epoch{epoch}")
            losses = []
            order = rng.permutation(len(labels))
            bs = opt_cfg.batch_size
            for start in range(0, len(labels), bs):
                sel = order[start : start + bs]
                xb = normalize_images(images[sel])
                yb = labels[sel].astype(np.int64)
                fresh = self._features_of(model, images[sel], cfg.remind_split)
                y_all = yb
                feats = fresh
                r = int(round(cfg.replay_ratio * len(yb)))
                if len(state.buffer) > 0 and r > 0:
                    items = rp.sample_batch(state.buffer, r, rep_rng)
                    dec = rp.pq_decode(state.codebook,
                                       np.stack([it.payload for it in items]))
                    feats = np.concatenate([fresh, dec])
                    y_all = np.concatenate(
                        [yb, np.array([it.label for it in items], dtype=np.int64)])
                logits = mdl.forward_from_features(
                    model, _batch_tensor(feats), cfg.remind_split)
                loss = ag.masked_softmax_cross_entropy(logits, y_all, _seen_mask(model))
                ag.backward(loss)
                sgd.step()
                losses.append(float(loss.data))
                codes = rp.pq_encode(state.codebook, fresh)
                for row in range(len(yb)):
                    item = rp.ReplayItem(payload=codes[row].copy(), kind="latent",
                                         label=int(yb[row]), episode=episode.index)
                    _buffer_offer(cfg, state.buffer, item, res_rng)
            epoch_losses.append(float(np.mean(losses)))
            if log:
                log(f"episode {episode.index} epoch {epoch + 1}/{episode.epochs} "
                    f"loss {epoch_losses[-1]:.4f}")
        state.episodes_completed = episode.index
        return epoch_losses


class NISPA(SequentialStrategy):
    """Sparse connection masks; at episode end the most active units are
    frozen (incoming weights locked) and a fraction of the weakest unfrozen
    connections is swapped for random masked-off ones (count preserving)."""

    def init_state(self, model) -> TrainState:
        state = super().init_state(model)
        state.frozen_units = [np.zeros(c, dtype=bool) for c in model.config.channels]
        return state

    def begin_episode(self, model, state, episode, streams):
        if state.conn_masks is None:
            rng = streams.rng("nispa-init")
            masks = {}
            for i, w in enumerate(model.conv_w, start=1):
                keep = rng.random(w.data.shape) >= self.cfg.nispa_sparsity
                masks[f"conv{i}.w"] = keep.astype(np.float32)
            state.conn_masks = masks
            _nispa_refresh_update_masks(model, state)

    def step(self, model, state, xb, yb, streams):
        logits = mdl.forward(model, _batch_tensor(xb), conn_masks=state.conn_masks)
        return ag.masked_softmax_cross_entropy(logits, yb, _seen_mask(model))

    def end_episode(self, model, state, episode, streams):
        nispa_rewire(model, state, episode, self.cfg, streams)


def _unit_activations(model, state, episode, batch=512):
    """Mean |post-relu activation| per unit per stage over the episode."""
    images, _ = episode.train_arrays()
    cfg = model.config
    sums = [np.zeros(c, dtype=np.float64) for c in cfg.channels]
    n = 0
    with ag.no_grad():
        for start in range(0, len(images), batch):
            xb = normalize_images(images[start : start + batch])
            x = ag._to_nhwc(_batch_tensor(xb))
            for s in range(1, len(cfg.channels) + 1):
                w, b = model.conv_w[s - 1], model.conv_b[s - 1]
                if state.conn_masks and f"conv{s}.w" in state.conn_masks:
                    w = ag.mul_const(w, state.conn_masks[f"conv{s}.w"])
                x = ag.conv2d_nhwc(x, w, b, cfg.stride, cfg.padding, fuse_relu=True)
                sums[s - 1] += np.abs(x.data).mean(axis=(1, 2)).sum(axis=0)
                if s in cfg.pool_after:
                    x = ag.max_pool2d_nhwc(x, cfg.pool_window, cfg.pool_stride)
            n += len(xb)
    return [s / n for s in sums]


def _nispa_refresh_update_masks(model, state):
    """Trainable entries are active connections of unfrozen units; dropped
    connections and frozen units' weights stay bitwise constant."""
    frozen = state.frozen_units or [np.zeros(c, bool) for c in model.config.channels]
    for i, w in enumerate(model.conv_w, start=1):
        um = state.conn_masks[f"conv{i}.w"] > 0
        um &= ~frozen[i - 1][:, None, None, None]
        w.update_mask = um.astype(np.float32)
        bm = ~frozen[i - 1]
        model.conv_b[i - 1].update_mask = bm.astype(np.float32)


def nispa_rewire(model, state, episode, cfg: StrategyConfig, streams: SeedStreams):
    """Freeze units above the stable-activation quantile, then swap the
    lowest-|weight| unfrozen active connections for random inactive ones."""
    acts = _unit_activations(model, state, episode)
    rng = streams.persistent("rewire")
    for i, w in enumerate(model.conv_w, start=1):
        name = f"conv{i}.w"
        mask = state.conn_masks[name]
        thresh = np.quantile(acts[i - 1], cfg.nispa_stable_quantile)
        newly = acts[i - 1] >= thresh
        state.frozen_units[i - 1] |= newly
        frozen = state.frozen_units[i - 1]
        unfrozen_rows = ~frozen
        active = (mask > 0) & unfrozen_rows[:, None, None, None]
        inactive = (mask == 0) & unfrozen_rows[:, None, None, None]
        n_active = int(active.sum())
        r = int(np.floor(cfg.nispa_rewire_fraction * n_active))
        if r == 0:
            continue
        if r > n_active:
            raise StrategyError(
                f"rewire count {r} exceeds {n_active} unfrozen active connections")
        r = min(r, int(inactive.sum()))
        if r == 0:
            continue
        flat_active = np.flatnonzero(active.ravel())
        mags = np.abs(w.data.ravel()[flat_active])
        drop = flat_active[np.argsort(mags, kind="stable")[:r]]
        flat_inactive = np.flatnonzero(inactive.ravel())
        grow = rng.choice(flat_inactive, size=r, replace=False)
        flat_mask = mask.ravel()
        flat_mask[drop] = 0.0
        flat_mask[grow] = 1.0
        wflat = w.data.ravel()
        wflat[grow] = (rng.standard_normal(r) * 0.01).astype(np.float32)
    _nispa_refresh_update_masks(model, state)


# ---------------------------------------------------------------------------
# run orchestration

STRATEGY_CLASSES = {
    "naive_sequential": NaiveSequential,
    "mas": MAS,
    "mas_r": MASReplay,
    "der": DER,
    "derpp": DERpp,
    "remind": REMIND,
    "nispa": NISPA,
}


def _expand_for_episode(model, episode: Episode, streams: SeedStreams):
    new = [g for g in episode.local_to_global.values() if g >= model.class_count]
    if new:
        if sorted(new) != list(range(model.class_count, model.class_count + len(new))):
            raise StrategyError("global ids must arrive contiguously")
        mdl.expand_head(model, len(new), streams.rng(f"head-init/{episode.index}"))


def run_scenario(scenario: Scenario, s_cfg: StrategyConfig, o_cfg: ag.SgdConfig,
                 master_seed: int, log=None):
    """Train one strategy over the scenario, evaluating after each episode.

    Returns a dict with the accuracy matrix rows, per-cell counts, loss
    logs, and buffer/codebook statistics.
    """
    from . import metrics

    t0 = time.perf_counter()
    streams = SeedStreams(master_seed)
    rows, counts, losses = [], [], []

    if s_cfg.variant == "naive_independent":
        import dataclasses

        models = []
        for ep in scenario.episodes:
            m = mdl.build_backbone(mdl.BackboneConfig(),
                                   _independent_seed(master_seed, ep.index))
            _expand_for_episode_independent(m, ep, streams)
            # independent models train against their own head rows
            row_gids = _row_gids(m, ep)
            local_ep = dataclasses.replace(
                ep,
                local_to_global={
                    lc: row_gids.index(g) for lc, g in ep.local_to_global.items()
                },
            )
            strat = NaiveSequential(s_cfg)
            state = strat.init_state(m)
            losses.append(strat.train_episode(m, state, local_ep, o_cfg, streams, log))
            models.append(m)
            row, cnt = [], []
            for past in scenario.episodes[: ep.index]:
                acc, n = metrics.evaluate_with_model_map(
                    models[past.index - 1], past,
                    _row_gids(models[past.index - 1], past))
                row.append(acc)
                cnt.append(n)
            rows.append(row)
            counts.append(cnt)
            if log:
                log(f"[naive_independent] episode {ep.index} row: "
                    + " ".join(f"{a:.1f}" for a in row))
        return _result(scenario, s_cfg, o_cfg, master_seed, rows, counts, losses,
                       None, None, time.perf_counter() - t0, task_oracle=True)

    if s_cfg.variant == "joint":
        model = mdl.build_backbone(mdl.BackboneConfig(), master_seed)
        for ep in scenario.episodes:
            _expand_for_episode(model, ep, streams)
        union_images, union_labels = [], []
        for ep in scenario.episodes:
            xs, ys = ep.train_arrays()
            union_images.append(xs)
            union_labels.append(ys)
        images = np.concatenate(union_images)
        labels = np.concatenate(union_labels)
        epochs = max(ep.epochs for ep in scenario.episodes)
        sgd = ag.SGD(model.trainable_parameters(), o_cfg)
        mask = _seen_mask(model)
        epoch_losses = []
        for epoch in range(epochs):
            rng = streams.rng(f"shuffle/ep1/epoch{epoch}")
            batch_losses = []
            for xb, yb in iterate_batches(images, labels, o_cfg.batch_size, rng):
                logits = mdl.forward(model, _batch_tensor(xb))
                loss = ag.masked_softmax_cross_entropy(logits, yb, mask)
                ag.backward(loss)
                sgd.step()
                batch_losses.append(float(loss.data))
            epoch_losses.append(float(np.mean(batch_losses)))
            if log:
                log(f"[joint] epoch {epoch + 1}/{epochs} loss {epoch_losses[-1]:.4f}")
        losses.append(epoch_losses)
        final_row, final_cnt = metrics.evaluate(model, scenario, len(scenario.episodes))
        # the joint learner has no temporal structure: every row snapshots
        # the same final model (flagged in the report)
        for t in range(1, len(scenario.episodes) + 1):
            rows.append(final_row[:t])
            counts.append(final_cnt[:t])
        return _result(scenario, s_cfg, o_cfg, master_seed, rows, counts, losses,
                       None, None, time.perf_counter() - t0, flat_matrix=True)

    cls = STRATEGY_CLASSES[s_cfg.variant]
    strategy = cls(s_cfg)
    model = mdl.build_backbone(mdl.BackboneConfig(), master_seed)
    if s_cfg.variant == "remind":
        model.feature_split = s_cfg.remind_split
    state = strategy.init_state(model)

    for ep in scenario.episodes:
        _expand_for_episode(model, ep, streams)
        strategy.begin_episode(model, state, ep, streams)
        losses.append(strategy.train_episode(
            model, state, ep, o_cfg, streams, log))
        conn = state.conn_masks if s_cfg.variant == "nispa" else None
        row, cnt = metrics.evaluate(model, scenario, ep.index, conn_masks=conn)
        rows.append(row)
        counts.append(cnt)
        if log:
            log(f"[{s_cfg.variant}] episode {ep.index} row: "
                + " ".join(f"{a:.1f}" for a in row))

    buffer_stats = None
    if state.buffer is not None and (strategy.uses_buffer or len(state.buffer)):
        kinds = {}
        for it in state.buffer.items:
            kinds[f"episode_{it.episode}"] = kinds.get(f"episode_{it.episode}", 0) + 1
        buffer_stats = {
            "capacity": state.buffer.capacity,
            "size": len(state.buffer),
            "stream_count": state.buffer.stream_count,
            "per_episode": kinds,
        }
    codebook_stats = None
    if state.codebook is not None:
        codebook_stats = {
            "m": state.codebook.m,
            "k": state.codebook.k,
            "dim": state.codebook.dim,
            "final_sse": state.codebook.final_sse,
            "n_train": state.codebook.n_train,
            "bytes_per_item": state.codebook.m,
        }
    return _result(scenario, s_cfg, o_cfg, master_seed, rows, counts, losses,
                   buffer_stats, codebook_stats, time.perf_counter() - t0)


def _independent_seed(master: int, episode_index: int) -> int:
    from .seeding import stream_seed

    return stream_seed(master, f"independent/{episode_index}")


def _expand_for_episode_independent(model, episode, streams):
    k = len(episode.local_to_global)
    mdl.expand_head(model, k, streams.rng(f"head-init/independent/{episode.index}"))


def _row_gids(model, episode):
    return sorted(episode.local_to_global.values())


def _result(scenario, s_cfg, o_cfg, seed, rows, counts, losses, buffer_stats,
            codebook_stats, wall, task_oracle=False, flat_matrix=False):
    return {
        "scenario": scenario.name,
        "registry": list(scenario.registry),
        "strategy": asdict(s_cfg),
        "optimizer": {
            "learning_rate": o_cfg.learning_rate,
            "momentum": o_cfg.momentum,
            "weight_decay": o_cfg.weight_decay,
            "batch_size": o_cfg.batch_size,
        },
        "seed": seed,
        "rows": rows,
        "counts": counts,
        "loss_log": losses,
        "buffer": buffer_stats,
        "codebook": codebook_stats,
        "wall_clock_s": wall,
        "task_oracle": task_oracle,
        "flat_matrix": flat_matrix,
    }
