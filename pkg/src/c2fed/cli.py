"""Command line: ``c2fed {run,sweep,metrics,gen-bench,self-test}``.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import config as config_mod
from . import metrics, orchestrator, selftest
from .errors import C2FedError, ConfigError

log = logging.getLogger("c2fed")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SUMMARY_METRICS = ("Avg", "AIA", "FM", "FT", "BT", "CT")
TRACE_COLUMNS = ("run_id", "stage", "round", "client", "step", "component", "value")


def _setup_logging() -> None:
    level = os.environ.get("C2FED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


# run outputs


def write_record(rec: orchestrator.RunRecord, cfg: config_mod.RunConfig, outdir: Path) -> dict:
    """Write every file of one run; returns the metrics dict."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.dump(outdir / "config.yaml")
    (outdir / "accuracy_matrix.csv").write_text(rec.accuracy.to_csv(), encoding="utf-8")
    (outdir / "tasks.json").write_text(json.dumps(rec.accuracy.tasks_json(), indent=2), encoding="utf-8")
    out = metrics.write_metrics(rec.accuracy, outdir / "metrics.json", cfg.metrics.aia_variant)
    if cfg.outputs.loss_trace:
        with open(outdir / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for stage, rnd, client, step, comp, value in rec.loss_trace:
                w.writerow([cfg.run_id, stage, rnd, client, step, comp, repr(value)])
    if cfg.outputs.message_log:
        with open(outdir / "message_log.jsonl", "w", encoding="utf-8") as fh:
            for entry in rec.message_log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if cfg.outputs.w_snapshots:
        (outdir / "w_snapshots.json").write_text(json.dumps(rec.w_snapshots), encoding="utf-8")
    (outdir / "run_info.json").write_text(json.dumps({"wall_clock_s": rec.wall_clock}), encoding="utf-8")
    return out


def cmd_run(config_path: Optional[Path], overrides: list[str], outdir: Path) -> int:
    try:
        cfg = config_mod.load(config_path, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rec = orchestrator.run(cfg)
        out = write_record(rec, cfg, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (C2FedError, ValueError, FloatingPointError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({k: out[k] for k in ("Avg", "AIA", "FM", "BT", "FT", "CT")}, sort_keys=True))
    return EXIT_OK


# sweeps


def parse_grid(items: list[str]) -> list[tuple[str, list]]:
    grid = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not of the form key=v1,v2")
        key, raw = item.split("=", 1)
        values = [yaml.safe_load(v) for v in raw.split(",") if v != ""]
        if not values:
            raise ConfigError(f"grid entry {key} has no values")
        grid.append((key.strip(), values))
    return grid


def parse_seeds(text: Optional[str]) -> Optional[list[int]]:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None


def _point_name(point: tuple) -> str:
    if not point:
        return "default"
    return "__".join(f"{k}={v}" for k, v in point)


def _sweep_one(job: tuple) -> tuple:
    config_path, overrides, outdir, key = job
    try:
        cfg = config_mod.load(config_path, overrides)
        rec = orchestrator.run(cfg)
        out = write_record(rec, cfg, Path(outdir))
        return key, {m: out.get(m) for m in SUMMARY_METRICS}, None
    except Exception as exc:  # noqa: BLE001 - one failed point must not stop the sweep
        return key, None, f"{type(exc).__name__}: {exc}"


def cmd_sweep(config_path: Optional[Path], overrides: list[str], grid_items: list[str], seeds: Optional[list[int]],
              outdir: Path, jobs: int = 1) -> int:
    try:
        base = config_mod.load(config_path, overrides)
        grid = parse_grid(grid_items)
        seeds = seeds if seeds is not None else [base.seed]
        if not seeds:
            raise ConfigError("--seeds is empty")
        points = [tuple(zip([k for k, _ in grid], combo)) for combo in itertools.product(*[v for _, v in grid])]
        # validate every grid point before launching anything
        for pt in points:
            config_mod.load(config_path, overrides + [f"{k}={json.dumps(v)}" for k, v in pt])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    work = []
    for pt in points:
        name = _point_name(pt)
        for s in seeds:
            ov = overrides + [f"{k}={json.dumps(v)}" for k, v in pt] + [f"seed={s}", f"run_id={name}/seed_{s}"]
            work.append((config_path, ov, str(outdir / name / f"seed_{s}"), (name, s)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_one, work))
    else:
        results = [_sweep_one(w) for w in work]
    failures = [(key, err) for key, _, err in results if err is not None]
    by_point: dict[str, list[dict]] = {}
    for (name, _), vals, err in sorted(results, key=lambda r: r[0]):
        if err is None:
            by_point.setdefault(name, []).append(vals)
    write_summary(outdir / "summary.csv", by_point)
    for (name, s), err in failures:
        print(f"failed: {name} seed {s}: {err}", file=sys.stderr)
    return EXIT_FAIL if failures else EXIT_OK


def write_summary(path: Path, by_point: dict[str, list[dict]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["point", "n_seeds"]
        for m in SUMMARY_METRICS:
            header += [f"{m}_mean", f"{m}_std"]
        w.writerow(header)
        for name in sorted(by_point):
            rows = by_point[name]
            line = [name, len(rows)]
            for m in SUMMARY_METRICS:
                vals = [r[m] for r in rows if r.get(m) is not None]
                if vals:
                    line += [repr(float(np.mean(vals))), repr(float(np.std(vals)))]
                else:
                    line += ["", ""]
            w.writerow(line)


# other verbs


def cmd_metrics(run_dir: Path, variant: Optional[str] = None) -> int:
    run_dir = Path(run_dir)
    csv_path = run_dir / "accuracy_matrix.csv" if run_dir.is_dir() else run_dir
    try:
        text = csv_path.read_text(encoding="utf-8")
    except OSError as exc:
        print(f"cannot read {csv_path}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    meta = None
    tasks_path = csv_path.parent / "tasks.json"
    if tasks_path.exists():
        meta = json.loads(tasks_path.read_text(encoding="utf-8"))
    if variant is None:
        variant = "mean"
        cfg_path = csv_path.parent / "config.yaml"
        if cfg_path.exists():
            variant = (yaml.safe_load(cfg_path.read_text(encoding="utf-8")) or {}).get("metrics", {}).get(
                "aia_variant", "mean")
    try:
        m = metrics.AccuracyMatrix.from_csv(text, meta)
        m.validate()
        out = metrics.all_metrics(m, variant)
    except C2FedError as exc:
        print(f"metrics failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gen_bench(config_path: Optional[Path], overrides: list[str], outdir: Path) -> int:
    try:
        cfg = config_mod.load(config_path, overrides)
        bench = orchestrator.build_benchmark(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except C2FedError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    bench.save(outdir / "benchmark.json")
    cfg.dump(outdir / "config.yaml")
    print(str(outdir / "benchmark.json"))
    return EXIT_OK


def cmd_self_test(outdir: Optional[Path], fault: Optional[str] = None) -> int:
    report = selftest.run_all(fault=fault)
    for r in report:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']}: {r['detail']}")
    if outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        (Path(outdir) / "self_test.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return EXIT_OK if all(r["passed"] for r in report) else EXIT_FAIL


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="c2fed", description="Federated continual prompt learning simulator.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, default=None, help="YAML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. training.tau=0.5 (repeatable)")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    common(sub.add_parser("run", help="run one simulation"))
    sw = sub.add_parser("sweep", help="grid x seeds sweep")
    common(sw)
    sw.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2", help="grid axis (repeatable)")
    sw.add_argument("--seeds", default=None, help="comma-separated seeds")
    sw.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    me = sub.add_parser("metrics", help="recompute metrics from an accuracy matrix")
    me.add_argument("run_dir", type=Path, help="run directory or accuracy_matrix.csv")
    me.add_argument("--variant", choices=("mean", "sum"), default=None)
    common(sub.add_parser("gen-bench", help="write the synthetic benchmark as JSON"))
    st = sub.add_parser("self-test", help="run the embedded oracle checks")
    st.add_argument("--out", type=Path, default=None)
    st.add_argument("--inject-fault", default=None, choices=selftest.FAULTS, help=argparse.SUPPRESS)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.verb == "run":
        return cmd_run(args.config, args.overrides, args.out)
    if args.verb == "sweep":
        try:
            seeds = parse_seeds(args.seeds)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return cmd_sweep(args.config, args.overrides, args.grid, seeds, args.out, max(1, args.jobs))
    if args.verb == "metrics":
        return cmd_metrics(args.run_dir, args.variant)
    if args.verb == "gen-bench":
        return cmd_gen_bench(args.config, args.overrides, args.out)
    return cmd_self_test(args.out, args.inject_fault)


if __name__ == "__main__":
    sys.exit(main())
