"""Class-incremental evaluation and report emission.

R[t][i] is the percent accuracy on episode i's test split after finishing
episode t, with predictions taken as argmax over ALL registered global
classes (no task labels; a hit in another episode's class is an error).
Average accuracy A[t] is the unweighted mean of row t; backward transfer is
BWT = mean_i (R[T][i] - R[i][i]) over i < T.

Reports: report.json (versioned, full precision), matrix.csv
(episode,i,accuracy,n; accuracy as shortest round-trip repr so downstream
recomputation from the CSV is exact), curves.svg (A[t] polylines).
"""

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import model as mdl
from ._kernels import backend_name
from .data import Scenario, normalize_images

SCHEMA_VERSION = 1

EVAL_BATCH = 1024


class ReportError(ValueError):
    pass


def _predict(model, floats, conn_masks=None, batch=EVAL_BATCH):
    """Argmax class ids for pre-normalized float batches (ties: lowest id)."""
    preds = []
    with ag.no_grad():
        for start in range(0, len(floats), batch):
            xb = floats[start : start + batch]
            logits = mdl.forward(model, ag.Tensor(xb), mode="eval", conn_masks=conn_masks)
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(model, scenario: Scenario, episodes_completed: int, conn_masks=None):
    """Row t of the accuracy matrix: per-episode percent accuracy over all
    registered classes. Never mutates the model."""
    if episodes_completed < 1:
        raise ReportError("evaluate needs at least one completed episode")
    row, counts = [], []
    for ep in scenario.episodes[:episodes_completed]:
        floats, gids = ep.test_normalized()
        if len(gids) == 0:
            raise ReportError(f"episode {ep.index} has no test samples")
        preds = _predict(model, floats, conn_masks)
        row.append(100.0 * float((preds == gids).mean()))
        counts.append(int(len(gids)))
    return row, counts


def evaluate_with_model_map(model, episode, row_gids):
    """Task-oracle evaluation for the independent baseline: the model's head
    rows are mapped back to their global ids."""
    floats, gids = episode.test_normalized()
    preds = _predict(model, floats)
    mapped = np.asarray(row_gids)[preds]
    return 100.0 * float((mapped == gids).mean()), int(len(gids))


def average_accuracy(rows, t: int) -> float:
    """Unweighted mean of R[t][1..t] (1-based t)."""
    row = rows[t - 1]
    if len(row) != t:
        raise ReportError(f"row {t} has {len(row)} cells, expected {t}")
    return float(sum(row) / t)


def pooled_accuracy(rows, counts, t: int) -> float:
    """Sample-weighted mean of row t (reported alongside for transparency)."""
    row, cnt = rows[t - 1], counts[t - 1]
    return float(sum(a * n for a, n in zip(row, cnt)) / sum(cnt))


def backward_transfer(rows):
    """BWT = (1/(T-1)) sum_{i<T} (R[T][i] - R[i][i]); None when T == 1."""
    t = len(rows)
    if t < 2:
        return None
    final = rows[-1]
    return float(sum(final[i] - rows[i][i] for i in range(t - 1)) / (t - 1))


def build_report(run_result: dict) -> dict:
    rows = run_result["rows"]
    t = len(rows)
    report = {
        "schema_version": SCHEMA_VERSION,
        "scenario": run_result["scenario"],
        "registry": run_result["registry"],
        "strategy": run_result["strategy"],
        "optimizer": run_result["optimizer"],
        "seed": run_result["seed"],
        "rows": rows,
        "counts": run_result["counts"],
        "average_accuracy": [average_accuracy(rows, i) for i in range(1, t + 1)],
        "pooled_accuracy": [
            pooled_accuracy(rows, run_result["counts"], i) for i in range(1, t + 1)
        ],
        "backward_transfer": backward_transfer(rows),
        "loss_log": run_result["loss_log"],
        "buffer": run_result["buffer"],
        "codebook": run_result["codebook"],
        "wall_clock_s": run_result["wall_clock_s"],
        "task_oracle": run_result.get("task_oracle", False),
        "flat_matrix": run_result.get("flat_matrix", False),
        "kernel_backend": backend_name(),
    }
    return report


def matrix_csv_text(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "i", "accuracy", "n"])
    for t, (row, cnt) in enumerate(zip(report["rows"], report["counts"]), start=1):
        for i, (acc, n) in enumerate(zip(row, cnt), start=1):
            w.writerow([t, i, repr(float(acc)), n])
    return buf.getvalue()


def parse_matrix_csv(text: str):
    rows: dict[int, dict[int, float]] = {}
    counts: dict[int, dict[int, int]] = {}
    rd = csv.reader(io.StringIO(text))
    header = next(rd)
    if header != ["episode", "i", "accuracy", "n"]:
        raise ReportError(f"unexpected matrix.csv header {header}")
    for t_s, i_s, acc_s, n_s in rd:
        rows.setdefault(int(t_s), {})[int(i_s)] = float(acc_s)
        counts.setdefault(int(t_s), {})[int(i_s)] = int(n_s)
    out_rows = [[rows[t][i] for i in range(1, t + 1)] for t in sorted(rows)]
    out_counts = [[counts[t][i] for i in range(1, t + 1)] for t in sorted(rows)]
    return out_rows, out_counts


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def curves_svg_text(curves: list) -> str:
    """Polyline chart of average-accuracy curves. `curves` holds
    (label, [A[1]..A[T]]) pairs. Deterministic output, no timestamps."""
    width, height, pad = 640, 400, 48
    t_max = max((len(c[1]) for c in curves), default=1)
    x_of = lambda t: pad + (width - 2 * pad) * ((t - 1) / max(t_max - 1, 1))
    y_of = lambda a: height - pad - (height - 2 * pad) * (a / 100.0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        'stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for tick in range(0, 101, 20):
        y = y_of(tick)
        parts.append(
            f'<text x="{pad - 8}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-size="11">{tick}</text>'
        )
        parts.append(
            f'<line x1="{pad - 4}" y1="{y:.1f}" x2="{pad}" y2="{y:.1f}" stroke="black"/>'
        )
    for t in range(1, t_max + 1):
        x = x_of(t)
        parts.append(
            f'<text x="{x:.1f}" y="{height - pad + 16}" text-anchor="middle" '
            f'font-size="11">{t}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" '
        'font-size="12">episodes completed</text>'
    )
    parts.append(
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.0f})">average accuracy on seen classes (%)</text>'
    )
    for ci, (label, ys) in enumerate(curves):
        color = _PALETTE[ci % len(_PALETTE)]
        pts = " ".join(f"{x_of(t + 1):.1f},{y_of(a):.1f}" for t, a in enumerate(ys))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>'
        )
        parts.append(
            f'<text x="{width - pad + 4}" y="{pad + 14 * ci + 10}" font-size="11" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: dict, out_dir):
    """Write report.json, matrix.csv, curves.svg; byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "matrix.csv").write_text(matrix_csv_text(report))
    label = f"{report['strategy']['variant']}/seed{report['seed']}"
    svg = curves_svg_text([(label, report["average_accuracy"])])
    (out / "curves.svg").write_text(svg)
    return out


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("schema_version") != SCHEMA_VERSION:
        raise ReportError(
            f"schema version {report.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return report
