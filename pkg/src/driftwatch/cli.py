"""``driftwatch`` command line: calibrate, run, peek, losscurve, ingest-check."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, RunConfig, faithful, load_config
from .cpm import (
    AlphaMode,
    CalibrationError,
    ThresholdTable,
    ThresholdTableError,
    simulate_null_paths,
    table_filename,
    tables_from_paths,
)
from .evaluation import (
    LossParams,
    MissingThresholdTable,
    loss,
    peeking_simulation,
    run_experiment,
)
from .scenarios import (
    DEFAULT_CHANGE_BATCH,
    DEFAULT_TOTAL_BATCHES,
    SCENARIO_NAMES,
    DriftScenario,
    ScenarioError,
    read_pool_csv,
)
from .statistics import DegenerateSampleError
from .stream import StreamError, read_stream_csv

log = logging.getLogger("driftwatch")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING_CACHE, EXIT_NUMERICAL = 0, 2, 3, 4
DEFAULT_PEEK_ALPHAS = (0.05, 0.01, 0.005, 0.001)


def _fresh_dir(base: Path, prefix: str, digest: str) -> Path:
    """``base/prefix-digest``, suffixed ``-2``, ``-3``... rather than reusing an existing directory."""
    path = base / f"{prefix}-{digest}"
    n = 2
    while path.exists():
        path = base / f"{prefix}-{digest}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return repr(value) if isinstance(value, float) else str(value)


# ------------------------------------------------------------------ calibrate

def _table_requests(cfg: RunConfig):
    """Group CPM detectors by calibration inputs; each group needs one null simulation."""
    groups: dict = {}
    for det in cfg.detectors:
        if det.is_cpm:
            wanted = groups.setdefault(cfg.calibration_spec(det), set())
            wanted.add((AlphaMode(det.alpha_mode), det.alpha))
    return groups


def calibrate(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    cache = cfg.cache_dir
    cache.mkdir(parents=True, exist_ok=True)
    written, tables = [], []
    for spec, wanted in _table_requests(cfg).items():
        missing = [(mode, a) for mode, a in sorted(wanted) if not (cache / table_filename(spec, mode, a)).exists()]
        paths = None
        if missing:
            log.info("simulating %d null streams for %s (horizon %d)", spec.num_streams, spec.kind.value, spec.horizon)
            paths = simulate_null_paths(spec, jobs=jobs)
        for mode, alpha in sorted(wanted):
            target = cache / table_filename(spec, mode, alpha)
            if (mode, alpha) in missing:
                table, = tables_from_paths(spec, paths, mode, [alpha])
                table.save(target)
            else:
                table = ThresholdTable.load(target)
            tables.append(table)
            written.append(target)
    if tables:
        out = _fresh_dir(cfg.output_dir, "calibrate", cfg.digest())
        _write_csv(out / "thresholds.csv", ["statistic", "alpha_mode", "alpha", "t", "h_t"],
                   [[t.statistic_kind.value, t.alpha_mode.value, t.alpha, int(tt), repr(float(h))]
                    for t in tables for tt, h in zip(t.times, t.values)])
        plotting.plot_thresholds(tables, out / "thresholds.png")
    return written


# ------------------------------------------------------------------------ run

def _load_tables(cfg: RunConfig) -> dict[str, ThresholdTable]:
    tables = {}
    for det in cfg.detectors:
        if det.is_cpm:
            path = cfg.cache_dir / table_filename(cfg.calibration_spec(det), det.alpha_mode, det.alpha)
            if not path.exists():
                raise MissingThresholdTable(det)
            tables[det.id] = ThresholdTable.load(path)
    return tables


def _run_pair(args):
    detector, scenario, source, batch_size, repetitions, seed, table, params = args
    return run_experiment(detector, scenario, source, repetitions, seed, batch_size, table, params)


def _quartiles(values):
    if not values:
        return [0, "", "", "", "", ""]
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return [len(values)] + [repr(float(v)) for v in q]


def run(cfg: RunConfig, jobs: int = 1) -> Path:
    tables = _load_tables(cfg)
    tasks = [(det, scen, cfg.source, cfg.batch_size, cfg.repetitions, cfg.seed, tables.get(det.id), cfg.loss)
             for scen in cfg.scenarios for det in cfg.detectors]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_pair, tasks))
    else:
        reports = [_run_pair(t) for t in tasks]

    out = _fresh_dir(cfg.output_dir, "run", cfg.digest())
    (out / "config.json").write_text(json.dumps(cfg.raw, indent=1, sort_keys=True) + "\n")
    (out / "report.json").write_text(json.dumps([r.as_dict() for r in reports], indent=1) + "\n")
    _write_csv(out / "records.csv",
               ["scenario", "detector", "seed", "d", "k_hat", "loss", "delay", "theta_all", "theta_gated",
                "theta_outliers", "outlier_count"],
               [[r.scenario, r.detector, "-".join(map(str, rec.seed)), _fmt(rec.outcome.d), _fmt(rec.outcome.k_hat),
                 _fmt(rec.loss), _fmt(rec.delay), _fmt(rec.theta_all), _fmt(rec.theta_gated),
                 _fmt(rec.theta_outliers), rec.outlier_count]
                for r in reports for rec in r.records])
    rate_rows = [{"scenario": r.scenario, "detector": r.detector, "false_alarm_prob": r.false_alarm_prob,
                  "missed_prob": r.missed_prob} for r in reports]
    _write_csv(out / "rates.csv", ["scenario", "detector", "R", "false_alarm_prob", "missed_prob"],
               [[r.scenario, r.detector, r.R, r.false_alarm_prob, r.missed_prob] for r in reports])
    box_header = ["scenario", "detector", "n", "min", "q1", "median", "q3", "max"]
    _write_csv(out / "delays.csv", box_header, [[r.scenario, r.detector, *_quartiles(r.delays)] for r in reports])
    _write_csv(out / "losses.csv", box_header, [[r.scenario, r.detector, *_quartiles(r.losses)] for r in reports])
    _write_csv(out / "theta.csv", ["scenario", "detector", "set"] + box_header[2:],
               [[r.scenario, r.detector, which, *_quartiles(r.theta[which])]
                for r in reports for which in ("all", "gated", "outliers")])

    plotting.plot_rates(rate_rows, "false_alarm_prob", out / "false_alarm.png",
                        reference=cfg.detectors[0].alpha if cfg.detectors else None)
    plotting.plot_rates(rate_rows, "missed_prob", out / "missed_alarm.png")
    plotting.plot_boxes({(r.scenario, r.detector): r.delays for r in reports}, out / "delay.png",
                        "batch detection delay")
    plotting.plot_boxes({(r.scenario, r.detector): r.losses for r in reports}, out / "loss.png", "loss")
    plotting.plot_boxes({(r.scenario, f"{r.detector}:{which}"): r.theta[which]
                         for r in reports for which in ("all", "gated", "outliers") if r.theta[which]},
                        out / "theta.png", "drift fraction")
    return out


# ----------------------------------------------------------------------- peek

def peek_rows(alphas, sims: int = 10_000, seed: int = 0) -> list[dict]:
    return [peeking_simulation(a, sims=sims, seed=seed) for a in alphas]


def peek_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "pr_v_ge_1", "e_v"])
    for r in rows:
        writer.writerow([r["alpha"], r["pr_v_ge_1"], r["e_v"]])
    return buf.getvalue()


# ------------------------------------------------------------------ losscurve

def loss_curve(scenario: DriftScenario, batch_size: int, params: LossParams) -> list[tuple[str, float]]:
    """Loss for a detection in each batch ``1..J``, then a miss (``inf``)."""
    K = scenario.change_batch * batch_size
    rows = [(str(b), loss(K, b * batch_size, scenario, batch_size, params))
            for b in range(1, scenario.total_batches + 1)]
    rows.append(("inf", loss(K, math.inf, scenario, batch_size, params)))
    return rows


# ----------------------------------------------------------------------- main

def _parse_alphas(text: str) -> list[float]:
    return [float(a) for a in text.split(",") if a.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftwatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--faithful", action="store_true",
                        help="test and scan splits at every observation (slow)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("calibrate", parents=[common], help="simulate and cache CPM critical values")
    sub.add_parser("run", parents=[common], help="run detectors over drift scenarios")

    p = sub.add_parser("peek", parents=[common], help="false alarms from repeated testing")
    p.add_argument("--alphas", type=_parse_alphas, default=list(DEFAULT_PEEK_ALPHAS),
                   help="comma-separated significance levels")
    p.add_argument("--sims", type=int, default=10_000)

    p = sub.add_parser("losscurve", parents=[common], help="loss against detection batch")
    p.add_argument("--scenario", default="all", help=f"one of {', '.join(SCENARIO_NAMES)}, or 'all'")
    p.add_argument("--l0", type=float, default=-1000.0)
    p.add_argument("--l1", type=float, default=-250.0)
    p.add_argument("--readable", action="store_true", help="use l0=-350 so the post-change curves are not dwarfed")
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--change-batch", type=int, default=DEFAULT_CHANGE_BATCH)
    p.add_argument("--total-batches", type=int, default=DEFAULT_TOTAL_BATCHES)

    p = sub.add_parser("ingest-check", help="validate pool (z,label,pool) or stream (t,z,is_drift,label) CSVs")
    p.add_argument("paths", nargs="+", type=Path)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    cfg = load_config(args.config, overrides)
    return faithful(cfg) if args.faithful else cfg


def _ingest_check(paths) -> int:
    status = EXIT_OK
    for path in paths:
        try:
            with open(path) as fh:
                header = fh.readline().strip()
            if header.startswith("t,"):
                stream = read_stream_csv(path)
                print(f"{path}: ok, stream of {len(stream)} observations "
                      f"({int(stream.drift_flags.sum())} drift)")
            else:
                source = read_pool_csv(path)
                print(f"{path}: ok, {len(source.base_pool)} base and {len(source.drift_pool)} drift values")
        except (OSError, ScenarioError, StreamError) as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            status = EXIT_CONFIG
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "ingest-check":
            return _ingest_check(args.paths)
        out = args.out or Path("driftwatch-out")
        if args.command == "peek":
            rows = peek_rows(args.alphas, args.sims, args.seed or 0)
            text = peek_csv(rows)
            out.mkdir(parents=True, exist_ok=True)
            (out / "peek.csv").write_text(text)
            if rows:
                plotting.plot_peeking(rows, out / "peek.png")
            sys.stdout.write(text)
            return EXIT_OK
        if args.command == "losscurve":
            params = LossParams(-350.0 if args.readable else args.l0, args.l1)
            names = SCENARIO_NAMES if args.scenario == "all" else [args.scenario]
            scenarios = [DriftScenario.named(n, args.change_batch, args.total_batches) for n in names]
            curves = {s.name: loss_curve(s, args.batch_size, params) for s in scenarios}
            out.mkdir(parents=True, exist_ok=True)
            tag = "all" if args.scenario == "all" else scenarios[0].name
            rows = [[name, b, repr(v)] for name, pts in curves.items() for b, v in pts]
            _write_csv(out / f"losscurve_{tag}.csv", ["scenario", "detection_batch", "loss"], rows)
            plotting.plot_loss_curves(
                {s.label: ([int(b) for b, _ in curves[s.name][:-1]], [v for _, v in curves[s.name][:-1]])
                 for s in scenarios}, out / f"losscurve_{tag}.png", args.change_batch)
            sys.stdout.write("scenario,detection_batch,loss\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))
            return EXIT_OK
        cfg = _config_from_args(args)
        if args.command == "calibrate":
            for path in calibrate(cfg, args.jobs):
                print(path)
            return EXIT_OK
        print(run(cfg, args.jobs))
        return EXIT_OK
    except MissingThresholdTable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CACHE
    except (ConfigError, ScenarioError, StreamError, ThresholdTableError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CalibrationError, DegenerateSampleError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
