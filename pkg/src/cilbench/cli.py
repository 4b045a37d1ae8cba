"""Command-line entry point: run, synth, compare, inspect.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime error.
Each run writes one report directory per seed; the resolved configuration
(all defaults filled in) is echoed into every report. CL_NUM_WORKERS caps
concurrent (seed, strategy) workers.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import data as dt
from . import metrics
from .autograd import SgdConfig
from .strategies import StrategyConfig, run_scenario


class ConfigError(ValueError):
    pass


def _strategy_config(raw: dict, override_variant=None) -> StrategyConfig:
    raw = dict(raw or {})
    remind = raw.pop("remind", {})
    nispa = raw.pop("nispa", {})
    if override_variant:
        raw["variant"] = override_variant
    kwargs = dict(raw)
    for key, val in remind.items():
        kwargs[f"remind_{key}"] = val
    for key, val in nispa.items():
        kwargs[f"nispa_{key}"] = val
    try:
        return StrategyConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad strategy config: {e}") from e


def _optimizer_config(raw: dict) -> SgdConfig:
    try:
        return SgdConfig(**(raw or {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad optimizer config: {e}") from e


def resolve_config(path, override_variant=None):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    s_cfg = _strategy_config(raw.get("strategy"), override_variant)
    o_cfg = _optimizer_config(raw.get("optimizer"))
    try:
        scenario = dt.build_scenario(raw, base_dir=p.parent)
    except (dt.DatasetError, dt.ScenarioError) as e:
        raise ConfigError(str(e)) from e
    return scenario, s_cfg, o_cfg, raw


def _echo(scenario, s_cfg, o_cfg, raw, seed):
    return {
        "name": scenario.name,
        "seed": seed,
        "episodes": [
            {
                "dataset": ep.dataset_stem,
                "classes": ep.local_classes,
                "epochs": ep.epochs,
                "global_ids": ep.new_global_ids,
            }
            for ep in scenario.episodes
        ],
        "shared_classes": raw.get("shared_classes", []),
        "strategy": asdict(s_cfg),
        "optimizer": asdict(o_cfg),
        "registry": scenario.registry,
    }


def _run_one(scenario, s_cfg, o_cfg, raw, seed, out_dir, verbose):
    log = (lambda msg: print(msg, file=sys.stderr)) if verbose else None
    result = run_scenario(scenario, s_cfg, o_cfg, seed, log=log)
    report = metrics.build_report(result)
    report["config_echo"] = _echo(scenario, s_cfg, o_cfg, raw, seed)
    run_dir = Path(out_dir) / f"{scenario.name}__{s_cfg.variant}__seed{seed}"
    metrics.emit_report(report, run_dir)
    return str(run_dir)


def cmd_run(args) -> int:
    scenario, s_cfg, o_cfg, raw = resolve_config(args.config, args.strategy)
    seeds = [int(s) for s in str(args.seed).split(",")] if args.seed is not None else [
        scenario.seed
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    statuses = []
    workers = int(os.environ.get("CL_NUM_WORKERS", "1"))
    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {
                pool.submit(_run_one, scenario, s_cfg, o_cfg, raw, seed, out,
                            args.verbose): seed
                for seed in seeds
            }
            for fut, seed in futs.items():
                statuses.append({"seed": seed, "dir": fut.result(), "status": "ok"})
    else:
        for seed in seeds:
            run_dir = _run_one(scenario, s_cfg, o_cfg, raw, seed, out, args.verbose)
            statuses.append({"seed": seed, "dir": run_dir, "status": "ok"})
    manifest = {
        "config": str(args.config),
        "echo": _echo(scenario, s_cfg, o_cfg, raw, scenario.seed),
        "seeds": seeds,
        "out": str(out),
        "runs": sorted(statuses, key=lambda r: r["seed"]),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for st in manifest["runs"]:
        print(f"seed {st['seed']}: {st['dir']}")
    return 0


def cmd_synth(args) -> int:
    sep = dt.DIFFICULTY_PRESETS.get(args.difficulty)
    if sep is None:
        try:
            sep = float(args.difficulty)
        except ValueError:
            raise ConfigError(
                f"difficulty must be easy|medium|hard or a positive float, got {args.difficulty!r}"
            ) from None
    try:
        spec = dt.SynthSpec(
            classes=args.classes,
            per_class_train=args.per_class,
            per_class_test=args.per_class_test or max(1, args.per_class // 5),
            separation=sep,
            seed=args.seed,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    echo = dt.synth_write(spec, args.out)
    print(json.dumps(echo, indent=2, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    reports = []
    for d in args.reports:
        path = Path(d) / "report.json"
        if not path.exists():
            raise ConfigError(f"no report.json under {d}")
        reports.append(metrics.load_report(path))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    curves = []
    for rep in reports:
        final_a = rep["average_accuracy"][-1]
        bwt = rep["backward_transfer"]
        rows.append(
            {
                "scenario": rep["scenario"],
                "strategy": rep["strategy"]["variant"],
                "seed": rep["seed"],
                "final_average_accuracy": final_a,
                "backward_transfer": bwt,
            }
        )
        curves.append((f"{rep['strategy']['variant']}/s{rep['seed']}",
                       rep["average_accuracy"]))
    lines = ["scenario,strategy,seed,final_average_accuracy,backward_transfer"]
    for r in sorted(rows, key=lambda r: (r["scenario"], r["strategy"], r["seed"])):
        bwt = "" if r["backward_transfer"] is None else repr(r["backward_transfer"])
        lines.append(
            f"{r['scenario']},{r['strategy']},{r['seed']},"
            f"{r['final_average_accuracy']!r},{bwt}"
        )
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    (out / "curves.svg").write_text(metrics.curves_svg_text(curves))
    print(f"{len(rows)} run(s) -> {out / 'summary.csv'}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"{path} not found")
    if path.suffix == ".json":
        scenario, s_cfg, o_cfg, raw = resolve_config(path)
        print(f"scenario {scenario.name!r}: {len(scenario.episodes)} episodes, "
              f"{scenario.num_classes} global classes")
        for ep in scenario.episodes:
            names = [scenario.registry[g] for g in ep.new_global_ids]
            print(f"  episode {ep.index}: {ep.dataset_stem} "
                  f"classes={ep.local_classes} -> global {ep.new_global_ids} {names} "
                  f"({ep.train.n} train / {ep.test.n} test, {ep.epochs} epochs)")
        return 0
    ds = dt.load_dataset(path)
    hist = ds.histogram()
    print(f"{path}: split={ds.split} n={ds.n} classes={len(ds.class_names)}")
    for i, name in enumerate(ds.class_names):
        print(f"  [{i}] {name}: {int(hist[i])}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="cilbench",
                                 description="class-incremental continual-learning benchmark")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a strategy over a scenario config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", default=None,
                     help="comma-separated master seeds (default: scenario seed)")
    run.add_argument("--out", required=True)
    run.add_argument("--strategy", default=None, help="override strategy variant")
    run.add_argument("--verbose", action="store_true")
    run.set_defaults(func=cmd_run)

    synth = sub.add_parser("synth", help="generate a synthetic dataset pair")
    synth.add_argument("--classes", type=int, required=True)
    synth.add_argument("--per-class", type=int, required=True)
    synth.add_argument("--per-class-test", type=int, default=None)
    synth.add_argument("--difficulty", default="medium")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="output path stem")
    synth.set_defaults(func=cmd_synth)

    comp = sub.add_parser("compare", help="merge run reports into a summary")
    comp.add_argument("--reports", nargs="+", required=True)
    comp.add_argument("--out", required=True)
    comp.set_defaults(func=cmd_compare)

    ins = sub.add_parser("inspect", help="print a dataset or scenario summary")
    ins.add_argument("path")
    ins.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, dt.DatasetError, dt.ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 3
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
