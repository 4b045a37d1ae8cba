import numpy as np
import pytest

import cilbench.autograd as ag
import cilbench.data as dt
import cilbench.model as M
import cilbench.replay as rp
import cilbench.strategies as st
from cilbench.seeding import SeedStreams, stream_rng


def tiny_scenario(tmp_path, n_eps=3, per=20, epochs=1, seed=40, classes_per=2):
    k = n_eps * classes_per
    spec = dt.SynthSpec(classes=k, per_class_train=per, per_class_test=8, seed=seed)
    dt.synth_write(spec, tmp_path / "ds")
    cfg = {
        "name": "tiny",
        "seed": seed,
        "episodes": [
            {"dataset": "ds",
             "classes": list(range(classes_per * i, classes_per * (i + 1))),
             "epochs": epochs}
            for i in range(n_eps)
        ],
    }
    return dt.build_scenario(cfg, tmp_path)


def opt(lr=0.01, batch=16):
    return ag.SgdConfig(learning_rate=lr, momentum=0.9, batch_size=batch)


def params_bytes(model):
    return b"".join(p.data.tobytes() for _, p in model.named_parameters())


def run(scenario, variant, seed=7, lr=0.01, batch=16, **kw):
    cfg = st.StrategyConfig(variant=variant, **kw)
    return st.run_scenario(scenario, cfg, opt(lr, batch), seed)


# ---------------------------------------------------------------------------
# dispatcher basics


def test_unknown_variant_rejected():
    with pytest.raises(st.StrategyError):
        st.StrategyConfig(variant="magic")


def test_negative_hyperparameters_rejected():
    with pytest.raises(st.StrategyError):
        st.StrategyConfig(der_alpha=-0.1)


def test_tiny_lr_keeps_model_fixed(tmp_path):
    """The config contract requires lr > 0, so the spec's lr=0 case is run
    at an lr small enough that float32 rounding cannot move He-scale conv
    weights: weights stay bitwise constant and the loss log still appears."""
    sc = tiny_scenario(tmp_path, n_eps=2)
    model = M.build_backbone(M.BackboneConfig(), 7)
    streams = SeedStreams(7)
    strat = st.NaiveSequential(st.StrategyConfig(variant="naive_sequential"))
    state = strat.init_state(model)
    before = [w.data.copy() for w in model.conv_w]
    logs = []
    o_cfg = ag.SgdConfig(learning_rate=1e-12, momentum=0.9,
                         weight_decay=0.0, batch_size=16)
    for ep in sc.episodes:
        st._expand_for_episode(model, ep, streams)
        logs.append(strat.train_episode(model, state, ep, o_cfg, streams))
    assert len(logs) == 2 and all(len(l) == 1 for l in logs)
    moved = [w for w, snap in zip(model.conv_w, before)
             if w.data.tobytes() != snap.tobytes()]
    assert not moved


def test_independent_beats_naive_final_on_early_episodes(tmp_path):
    """Per-episode accuracy of the independent models is at least the
    sequential model's final accuracy on early episodes (which forgets)."""
    sc = tiny_scenario(tmp_path, n_eps=3, per=30, epochs=3)
    res_ind = run(sc, "naive_independent", seed=6)
    res_seq = run(sc, "naive_sequential", seed=6)
    for i in range(2):  # early episodes
        assert res_ind["rows"][2][i] >= res_seq["rows"][2][i]


def test_loss_log_shape(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=2, epochs=3)
    res = run(sc, "naive_sequential")
    assert [len(l) for l in res["loss_log"]] == [3, 3]


def test_buffer_capacity_invariant(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=3)
    for variant in ("derpp", "mas_r"):
        res = run(sc, variant, buffer_capacity=10)
        assert res["buffer"]["size"] <= 10
        assert res["buffer"]["stream_count"] >= res["buffer"]["size"]


# ---------------------------------------------------------------------------
# equivalence reductions (bitwise)


def test_derpp_beta_zero_equals_der(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=2)
    m_der = trajectory(sc, st.StrategyConfig(variant="der", der_alpha=0.4, der_beta=0.0))
    m_pp = trajectory(sc, st.StrategyConfig(variant="derpp", der_alpha=0.4, der_beta=0.0))
    assert m_der == m_pp


def trajectory(scenario, cfg, seed=7):
    model = M.build_backbone(M.BackboneConfig(), seed)
    streams = SeedStreams(seed)
    strat_cls = st.STRATEGY_CLASSES[cfg.variant]
    strat = strat_cls(cfg)
    state = strat.init_state(model)
    blobs = []
    for ep in scenario.episodes:
        st._expand_for_episode(model, ep, streams)
        strat.begin_episode(model, state, ep, streams)
        strat.train_episode(model, state, ep, opt(), streams)
        blobs.append(params_bytes(model))
    return blobs


@pytest.mark.parametrize("variant", ["mas", "mas_r", "der", "derpp"])
def test_inert_variants_equal_naive_sequential(variant, tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=3)
    base = trajectory(sc, st.StrategyConfig(variant="naive_sequential"))
    inert = trajectory(
        sc,
        st.StrategyConfig(variant=variant, mas_lambda=0.0, der_alpha=0.0,
                          der_beta=0.0, buffer_capacity=0),
    )
    assert base == inert


# ---------------------------------------------------------------------------
# MAS


def test_mas_importance_hand_check_single_linear_unit():
    """y = w x with samples x in {1, 2}: mean |d(y^2)/dw| = |2w| * 2.5."""
    w = ag.Tensor(np.array([[1.5]], np.float32), requires_grad=True, name="w")
    b = ag.Tensor(np.zeros(1, np.float32), requires_grad=True, name="b")
    total = np.zeros((1, 1), np.float32)
    for x in (1.0, 2.0):
        out = ag.linear(ag.Tensor(np.array([[x]], np.float32)), w, b)
        ag.backward(ag.sum_of_squares(out))
        total += np.abs(w.grad)
        w.grad = None
        b.grad = None
    got = float(total[0, 0]) / 2.0
    assert abs(got - abs(2 * 1.5) * 2.5) < 1e-5


def test_mas_zero_output_model_zero_importance(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=1)
    m = M.build_backbone(M.BackboneConfig(), 0)
    M.expand_head(m, 2, stream_rng(0, "h"))
    for w in m.conv_w:
        w.data[:] = 0
    m.head_w.data[:] = 0
    m.head_b.data[:] = 0
    state = st.TrainState(buffer=rp.ReservoirBuffer(0))
    st.accumulate_importance(m, state, sc.episodes[0])
    assert all(np.all(v == 0) for v in state.omega.values())


def test_mas_duplicated_dataset_mean_invariance(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=1, per=6)
    ep = sc.episodes[0]
    m = M.build_backbone(M.BackboneConfig(), 3)
    M.expand_head(m, 2, stream_rng(3, "h"))

    state1 = st.TrainState()
    st.accumulate_importance(m, state1, ep)

    import dataclasses

    images, labels = ep.train.images, ep.train.labels
    doubled = dt.DatasetFile(
        np.concatenate([images, images]), np.concatenate([labels, labels]),
        ep.train.class_names, "train")
    ep2 = dataclasses.replace(ep, train=doubled)
    state2 = st.TrainState()
    st.accumulate_importance(m, state2, ep2)
    for name in state1.omega:
        np.testing.assert_allclose(state1.omega[name], state2.omega[name],
                                   rtol=1e-5, atol=1e-7)


def test_mas_penalty_hand_cases():
    p = ag.Tensor(np.array([2.0, 0.0], np.float32), requires_grad=True, name="p")
    anchor = np.array([1.0, 1.0], np.float32)
    omega = np.array([1.0, 2.0], np.float32)
    # theta - theta* = [1, -1], omega = [1, 2], lambda = 0.5 -> 0.5*(1+2) = 1.5
    pen = ag.quadratic_penalty([p], [anchor], [omega], 0.5)
    assert abs(float(pen.data) - 1.5) < 1e-6
    # theta == theta* -> 0
    pen = ag.quadratic_penalty([p], [p.data.copy()], [omega], 0.5)
    assert float(pen.data) == 0.0
    # omega == 0 -> 0
    pen = ag.quadratic_penalty([p], [anchor], [np.zeros(2, np.float32)], 0.5)
    assert float(pen.data) == 0.0


def test_mas_omega_nonnegative_and_monotone(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=2)
    cfg = st.StrategyConfig(variant="mas", mas_lambda=0.5)
    model = M.build_backbone(M.BackboneConfig(), 5)
    streams = SeedStreams(5)
    strat = st.MAS(cfg)
    state = strat.init_state(model)
    after_ep1 = None
    for ep in sc.episodes:
        st._expand_for_episode(model, ep, streams)
        strat.train_episode(model, state, ep, opt(), streams)
        if ep.index == 1:
            after_ep1 = {k: v.copy() for k, v in state.omega.items()}
    for name, om in state.omega.items():
        assert np.all(om >= 0)
        prev = after_ep1[name]
        sl = tuple(slice(0, s) for s in prev.shape)
        assert np.all(om[sl] >= prev - 1e-7)  # additive across episodes


# ---------------------------------------------------------------------------
# DER


def test_der_empty_buffer_is_plain_ce(tmp_path):
    rng = np.random.default_rng(0)
    model = M.build_backbone(M.BackboneConfig(), 1)
    M.expand_head(model, 2, stream_rng(1, "h"))
    cfg = st.StrategyConfig(variant="der", der_alpha=0.7, der_beta=0.0)
    strat = st.DER(cfg)
    state = strat.init_state(model)
    xb = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    yb = np.array([0, 1, 0, 1])
    loss = strat.step(model, state, xb, yb, SeedStreams(1))
    with ag.no_grad():
        ce = ag.masked_softmax_cross_entropy(
            M.forward(model, ag.Tensor(xb)), yb, np.ones(2, bool))
    assert float(loss.data) == float(ce.data)


def test_der_loss_hand_arithmetic():
    """2 classes, 1 buffer item: total = CE + alpha*mean((h-z)^2)."""
    model = M.build_backbone(M.BackboneConfig(), 2)
    M.expand_head(model, 2, stream_rng(2, "h"))
    alpha = 0.6
    cfg = st.StrategyConfig(variant="der", der_alpha=alpha, der_beta=0.0,
                            replay_ratio=0.25, buffer_capacity=4)
    strat = st.DER(cfg)
    state = strat.init_state(model)
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 256, (3, 32, 32), np.uint8)
    snap = np.array([0.3, -0.2], np.float32)
    state.buffer.items.append(rp.ReplayItem(
        payload=raw, kind="raw", label=1, episode=1,
        logits=snap, logit_classes=np.arange(2)))
    state.buffer.stream_count = 1

    xb = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    yb = np.array([0, 1, 0, 1])
    loss = strat.step(model, state, xb, yb, SeedStreams(9))

    with ag.no_grad():
        ce = ag.masked_softmax_cross_entropy(
            M.forward(model, ag.Tensor(xb)), yb, np.ones(2, bool))
        h = M.forward(model, ag.Tensor(dt.normalize_images(raw[None]))).data[0]
    expected = float(ce.data) + alpha * float(np.mean((h - snap) ** 2))
    assert abs(float(loss.data) - expected) < 1e-5


def test_replay_batch_composition(tmp_path):
    """Each step uses exactly replay_ratio * batch rehearsal samples."""
    sc = tiny_scenario(tmp_path, n_eps=2, per=16)
    cfg = st.StrategyConfig(variant="derpp", replay_ratio=0.5, buffer_capacity=50)
    model = M.build_backbone(M.BackboneConfig(), 4)
    streams = SeedStreams(4)
    strat = st.DERpp(cfg)
    state = strat.init_state(model)
    seen = []
    orig = rp.sample_batch

    def spy(buffer, count, rng):
        seen.append(count)
        return orig(buffer, count, rng)

    rp.sample_batch = spy
    try:
        for ep in sc.episodes:
            st._expand_for_episode(model, ep, streams)
            strat.train_episode(model, state, ep, opt(batch=16), streams)
    finally:
        rp.sample_batch = orig
    assert seen and all(c == 8 for c in seen)  # 0.5 * 16


def test_max_entropy_selection_keeps_uncertain(tmp_path):
    cfg = st.StrategyConfig(variant="der", selection="max_entropy",
                            buffer_capacity=2)
    buf = rp.ReservoirBuffer(2)
    certain = rp.ReplayItem(payload=np.zeros(4, np.uint8), kind="raw", label=0,
                            episode=1, logits=np.array([10.0, -10.0], np.float32),
                            logit_classes=np.arange(2))
    uncertain = rp.ReplayItem(payload=np.ones(4, np.uint8), kind="raw", label=1,
                              episode=1, logits=np.array([0.1, 0.0], np.float32),
                              logit_classes=np.arange(2))
    rng = stream_rng(0, "r")
    st._buffer_offer(cfg, buf, certain, rng)
    st._buffer_offer(cfg, buf, certain, rng)
    st._buffer_offer(cfg, buf, uncertain, rng)  # overflow: replaces a certain one
    ents = [st._entropy(it.logits) for it in buf.items]
    assert max(ents) == pytest.approx(st._entropy(uncertain.logits))


# ---------------------------------------------------------------------------
# REMIND


def test_remind_prefix_frozen_and_latent_payload(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=2, per=24, epochs=1)
    cfg = st.StrategyConfig(variant="remind", remind_split=4, remind_m=8,
                            remind_k=16, remind_iterations=4, buffer_capacity=30)
    model = M.build_backbone(M.BackboneConfig(), 6)
    streams = SeedStreams(6)
    strat = st.REMIND(cfg)
    state = strat.init_state(model)

    ep1 = sc.episodes[0]
    st._expand_for_episode(model, ep1, streams)
    strat.train_episode(model, state, ep1, opt(), streams)
    assert model.frozen_prefix == 4
    assert state.codebook is not None
    prefix_snap = [w.data.copy() for w in model.conv_w[:4]]

    ep2 = sc.episodes[1]
    st._expand_for_episode(model, ep2, streams)
    strat.train_episode(model, state, ep2, opt(), streams)
    for w, snap in zip(model.conv_w[:4], prefix_snap):
        assert w.data.tobytes() == snap.tobytes()
    # suffix must actually train
    assert len(state.buffer) > 0
    for it in state.buffer.items:
        assert it.kind == "latent"
        assert it.payload.dtype == np.uint8
        assert it.payload.shape == (8,)  # exactly m bytes


def test_remind_missing_codebook_errors(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=2, per=20)
    cfg = st.StrategyConfig(variant="remind", remind_m=8, remind_k=16)
    model = M.build_backbone(M.BackboneConfig(), 1)
    streams = SeedStreams(1)
    strat = st.REMIND(cfg)
    state = strat.init_state(model)
    ep2 = sc.episodes[1]
    st._expand_for_episode(sc_model_with_classes(model, 4, streams), ep2, streams)
    with pytest.raises(st.StrategyError, match="codebook"):
        strat.train_episode(model, state, ep2, opt(), streams)


def sc_model_with_classes(model, k, streams):
    if model.class_count < k:
        M.expand_head(model, k - model.class_count, streams.rng("pad"))
    return model


def test_remind_decoded_distance_equals_quantization_error(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=1, per=24)
    cfg = st.StrategyConfig(variant="remind", remind_split=4, remind_m=8,
                            remind_k=16, remind_iterations=5, buffer_capacity=64)
    model = M.build_backbone(M.BackboneConfig(), 8)
    streams = SeedStreams(8)
    strat = st.REMIND(cfg)
    state = strat.init_state(model)
    ep1 = sc.episodes[0]
    st._expand_for_episode(model, ep1, streams)
    strat.train_episode(model, state, ep1, opt(), streams)

    images, _ = ep1.train_arrays()
    feats = strat._features_of(model, images, 4)
    recon = rp.pq_decode(state.codebook, rp.pq_encode(state.codebook, feats))
    sse = float(((feats.astype(np.float64) - recon.astype(np.float64)) ** 2).sum())
    assert sse == pytest.approx(state.codebook.final_sse, rel=1e-9)


def test_remind_storage_arithmetic():
    # m=32 byte codes vs a 32x32x3 byte image: 96x smaller payload
    assert (32 * 32 * 3) / 32 == 96.0


# ---------------------------------------------------------------------------
# NISPA


def nispa_setup(tmp_path, rewire_fraction=0.1, epochs=1):
    sc = tiny_scenario(tmp_path, n_eps=2, per=16, epochs=epochs)
    cfg = st.StrategyConfig(variant="nispa", nispa_sparsity=0.5,
                            nispa_rewire_fraction=rewire_fraction,
                            nispa_stable_quantile=0.75)
    model = M.build_backbone(M.BackboneConfig(), 9)
    streams = SeedStreams(9)
    strat = st.NISPA(cfg)
    state = strat.init_state(model)
    return sc, cfg, model, streams, strat, state


def test_nispa_rewire_zero_fraction_masks_unchanged(tmp_path):
    sc, cfg, model, streams, strat, state = nispa_setup(tmp_path, rewire_fraction=0.0)
    ep = sc.episodes[0]
    st._expand_for_episode(model, ep, streams)
    strat.begin_episode(model, state, ep, streams)
    before = {k: v.copy() for k, v in state.conn_masks.items()}
    strat.train_episode(model, state, ep, opt(), streams)
    for k in before:
        np.testing.assert_array_equal(state.conn_masks[k], before[k])


def test_nispa_rewire_preserves_connection_count(tmp_path):
    sc, cfg, model, streams, strat, state = nispa_setup(tmp_path, rewire_fraction=0.2)
    ep = sc.episodes[0]
    st._expand_for_episode(model, ep, streams)
    strat.begin_episode(model, state, ep, streams)
    before = {k: int(v.sum()) for k, v in state.conn_masks.items()}
    strat.train_episode(model, state, ep, opt(), streams)
    after = {k: int(v.sum()) for k, v in state.conn_masks.items()}
    assert before == after


def test_nispa_frozen_unit_weights_survive_next_episode(tmp_path):
    sc, cfg, model, streams, strat, state = nispa_setup(tmp_path)
    ep1, ep2 = sc.episodes
    st._expand_for_episode(model, ep1, streams)
    strat.begin_episode(model, state, ep1, streams)
    strat.train_episode(model, state, ep1, opt(), streams)
    frozen_rows = {
        i: state.frozen_units[i].copy() for i in range(5) if state.frozen_units[i].any()
    }
    assert frozen_rows, "expected some frozen units after episode 1"
    snaps = {i: model.conv_w[i].data[rows].copy() for i, rows in frozen_rows.items()}
    st._expand_for_episode(model, ep2, streams)
    strat.begin_episode(model, state, ep2, streams)
    strat.train_episode(model, state, ep2, opt(), streams)
    for i, rows in frozen_rows.items():
        assert model.conv_w[i].data[rows].tobytes() == snaps[i].tobytes()


def test_nispa_masked_connections_inert(tmp_path):
    sc, cfg, model, streams, strat, state = nispa_setup(tmp_path)
    ep = sc.episodes[0]
    st._expand_for_episode(model, ep, streams)
    strat.begin_episode(model, state, ep, streams)
    mask = state.conn_masks["conv1.w"]
    dead = np.argwhere(mask == 0)[:5]
    before = model.conv_w[0].data[tuple(dead.T)].copy()
    strat.train_episode(model, state, ep, opt(), streams)
    after_mask = state.conn_masks["conv1.w"]
    still_dead = after_mask[tuple(dead.T)] == 0
    np.testing.assert_array_equal(
        model.conv_w[0].data[tuple(dead.T)][still_dead], before[still_dead])


# ---------------------------------------------------------------------------
# run orchestration


def test_naive_independent_uses_distinct_seeds(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=2, per=10)
    res = run(sc, "naive_independent")
    assert res["task_oracle"] is True
    assert len(res["rows"]) == 2


def test_joint_single_episode_equals_naive(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=1, per=16, epochs=2)
    res_j = run(sc, "joint", seed=3)
    res_n = run(sc, "naive_sequential", seed=3)
    assert res_j["rows"][-1] == res_n["rows"][-1]


def test_joint_union_stream_covers_all_classes(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=3, per=10)
    res = run(sc, "joint")
    assert len(res["rows"][-1]) == 3
    assert res["flat_matrix"] is True


def test_run_rows_are_triangular(tmp_path):
    sc = tiny_scenario(tmp_path, n_eps=3, per=10)
    res = run(sc, "naive_sequential")
    assert [len(r) for r in res["rows"]] == [1, 2, 3]
    assert [len(c) for c in res["counts"]] == [1, 2, 3]
