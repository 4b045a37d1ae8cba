import json

import numpy as np
import pytest

import cilbench.autograd as ag
import cilbench.data as dt
import cilbench.metrics as mt
import cilbench.model as M
from cilbench.seeding import stream_rng


def make_scenario(tmp_path, n_eps=2, per=6, seed=0):
    stems = []
    for i in range(n_eps):
        spec = dt.SynthSpec(classes=2, per_class_train=per, per_class_test=per,
                            seed=seed + i)
        dt.synth_write(spec, tmp_path / f"ds{i}")
        stems.append(f"ds{i}")
    cfg = {"name": "m", "seed": seed,
           "episodes": [{"dataset": s, "epochs": 1} for s in stems]}
    return dt.build_scenario(cfg, tmp_path)


def fresh_model(classes, seed=0):
    m = M.build_backbone(M.BackboneConfig(), seed)
    M.expand_head(m, classes, stream_rng(seed, "h"))
    return m


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_perfect_memorizer(tmp_path):
    # train == test makes a memorizing head reach 100%
    spec = dt.SynthSpec(classes=2, per_class_train=8, per_class_test=8, seed=1)
    train, test = dt.synth_generate(spec)
    dt.save_dataset(train, tmp_path / "d.train.clds1")
    dt.save_dataset(train, tmp_path / "d.test.clds1")  # identical split
    sc = dt.build_scenario({"name": "x", "episodes": [{"dataset": "d"}]}, tmp_path)
    m = fresh_model(2, seed=3)
    images, gids = sc.episodes[0].train_arrays()
    sgd = ag.SGD(m.trainable_parameters(), ag.SgdConfig(learning_rate=0.02))
    for _ in range(30):
        xb = dt.normalize_images(images)
        loss = ag.masked_softmax_cross_entropy(
            M.forward(m, ag.Tensor(xb)), gids, np.ones(2, bool))
        ag.backward(loss)
        sgd.step()
    row, counts = mt.evaluate(m, sc, 1)
    assert row[0] == 100.0
    assert counts[0] == 16


def test_evaluate_uniform_random_logits_near_chance(tmp_path):
    sc = make_scenario(tmp_path, n_eps=2, per=40)  # 4 global classes
    m = fresh_model(4, seed=5)
    # zero the net: logits equal the head bias; make those equal -> argmax
    # always class 0 -> accuracy = share of class 0 in each episode
    for w in m.conv_w:
        w.data[:] = 0
    m.head_w.data[:] = 0
    m.head_b.data[:] = 0
    row, _ = mt.evaluate(m, sc, 2)
    assert row[0] == 50.0  # episode 1 contains global class 0 (half its split)
    assert row[1] == 0.0  # episode 2's classes never win the tie


def test_evaluate_cross_episode_prediction_is_error(tmp_path):
    sc = make_scenario(tmp_path, n_eps=2, per=5)
    m = fresh_model(4, seed=2)
    m.head_b.data[:] = np.array([10.0, 9.0, -10.0, -10.0], np.float32)
    for w in m.conv_w:
        w.data[:] = 0
    m.head_w.data[:] = 0
    row, _ = mt.evaluate(m, sc, 2)
    assert row[1] == 0.0  # episode-2 samples all land in episode-1 classes


def test_evaluate_purity(tmp_path):
    sc = make_scenario(tmp_path)
    m = fresh_model(4, seed=7)
    before = m.checksum()
    mt.evaluate(m, sc, 2)
    assert m.checksum() == before


def test_evaluate_requires_completed_episode(tmp_path):
    sc = make_scenario(tmp_path)
    with pytest.raises(mt.ReportError):
        mt.evaluate(fresh_model(4), sc, 0)


# ---------------------------------------------------------------------------
# metric arithmetic


def test_average_accuracy_cases():
    rows = [[80.0], [80.0, 60.0]]
    assert mt.average_accuracy(rows, 1) == 80.0
    assert mt.average_accuracy(rows, 2) == 70.0
    rows = [[33.0], [33.0, 33.0], [33.0, 33.0, 33.0]]
    assert mt.average_accuracy(rows, 3) == pytest.approx(33.0)


def test_backward_transfer_cases():
    assert mt.backward_transfer([[50.0]]) is None
    # no change -> 0
    assert mt.backward_transfer([[80.0], [80.0, 70.0]]) == 0.0
    # diag (80, 70), R[2][1] = 75 -> -5
    assert mt.backward_transfer([[80.0], [75.0, 70.0]]) == -5.0
    # improvement: R[2][1]=85 vs 80 -> +5
    assert mt.backward_transfer([[80.0], [85.0, 70.0]]) == 5.0


def test_unweighted_mean_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = int(rng.integers(1, 6))
        rows = [[float(rng.uniform(0, 100)) for _ in range(i + 1)] for i in range(t)]
        a = mt.average_accuracy(rows, t)
        assert abs(a * t - sum(rows[t - 1])) < 1e-9


# ---------------------------------------------------------------------------
# report emission


def fake_report(seed=3, t=3):
    rng = np.random.default_rng(seed)
    rows = [[round(float(rng.uniform(0, 100)), 1) for _ in range(i + 1)] for i in range(t)]
    counts = [[int(rng.integers(50, 200)) for _ in range(i + 1)] for i in range(t)]
    result = {
        "scenario": "fake",
        "registry": ["a", "b"],
        "strategy": {"variant": "naive_sequential"},
        "optimizer": {"learning_rate": 0.01, "momentum": 0.9,
                      "weight_decay": 0.0, "batch_size": 64},
        "seed": seed,
        "rows": rows,
        "counts": counts,
        "loss_log": [[1.0]],
        "buffer": None,
        "codebook": None,
        "wall_clock_s": 1.5,
    }
    return mt.build_report(result)


def test_emit_report_files_and_determinism(tmp_path):
    rep = fake_report()
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    mt.emit_report(rep, out1)
    mt.emit_report(rep, out2)
    for name in ("report.json", "matrix.csv", "curves.svg"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_matrix_csv_row_count_triangular(tmp_path):
    for t in (1, 2, 3, 5):
        rep = fake_report(t=t)
        text = mt.matrix_csv_text(rep)
        assert len(text.splitlines()) == 1 + t * (t + 1) // 2


def test_matrix_csv_round_trip_exact():
    rep = fake_report(seed=11, t=4)
    rows, counts = mt.parse_matrix_csv(mt.matrix_csv_text(rep))
    assert rows == rep["rows"]
    assert counts == rep["counts"]


def test_report_json_schema_and_load(tmp_path):
    rep = fake_report()
    out = mt.emit_report(rep, tmp_path / "r")
    loaded = mt.load_report(out / "report.json")
    assert loaded["schema_version"] == mt.SCHEMA_VERSION
    assert loaded["average_accuracy"] == rep["average_accuracy"]
    bad = dict(loaded)
    bad["schema_version"] = 99
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(mt.ReportError, match="schema"):
        mt.load_report(tmp_path / "bad.json")


def test_merged_svg_has_one_polyline_per_curve():
    svg = mt.curves_svg_text([("a", [50.0, 60.0]), ("b", [70.0, 80.0])])
    assert svg.count("<polyline") == 2
    svg = mt.curves_svg_text([("only", [10.0])])
    assert svg.count("<polyline") == 1


def test_pooled_accuracy_weighting():
    rows = [[100.0], [100.0, 0.0]]
    counts = [[10], [10, 30]]
    assert mt.pooled_accuracy(rows, counts, 2) == 25.0
    assert mt.average_accuracy(rows, 2) == 50.0
