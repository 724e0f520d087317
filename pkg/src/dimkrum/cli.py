"""Command-line entry point: ``dimkrum {simulate,theory,indicators,sweep}``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
Every output file is written to a temporary sibling and renamed into place.
"""
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

from dimkrum.config import SCHEMA_VERSION, ConfigError, ExperimentConfig, load_config
from dimkrum.core import ContractError, atomic_write_bytes, read_flupd, write_flupd
from dimkrum.theory import (
    GaussianDemoSpec,
    indicators,
    mc_error_prob,
    sample_demo_round,
    set_error_bound,
    single_dim_error_prob,
)

log = logging.getLogger("dimkrum")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ROUND_COLUMNS = ["schema_version", "repeat", "round", "acc", "asr", "i_star", "selected", "malicious_excluded"]
SWEEP_COLUMNS = [
    "schema_version", "param", "value", "acc_mean", "acc_std", "asr_mean", "asr_std", "detection_rate_mean",
]
THEORY_COLUMNS = ["delta_over_sigma", "analytic_p", "mc_p", "mc_stderr", "chebyshev_bound"]
INDICATOR_COLUMNS = ["schema_version", "fraction", "dims", "dis_sum_ratio", "rel_strength"]


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ output


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x)
    return x


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def parse_floats(text: str) -> list[float]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"cannot parse number list {text!r}") from exc


# ------------------------------------------------------------------ simulate


def _run_repeat(cfg: ExperimentConfig, repeat: int, dump_dir: str | None) -> dict:
    """One repeat; never raises, so partial rounds survive a mid-run failure."""
    from dimkrum.fedsim import run_experiment

    rows: list[dict] = []

    def on_round(m, rs, outcome):
        rows.append(
            {
                "schema_version": SCHEMA_VERSION,
                "repeat": repeat,
                "round": m.round,
                "acc": m.acc,
                "asr": m.asr,
                "i_star": m.i_star,
                "selected": " ".join(str(i) for i in m.selected) if m.selected is not None else None,
                "malicious_excluded": m.malicious_excluded,
            }
        )
        if dump_dir is not None:
            write_flupd(Path(dump_dir) / f"repeat{repeat:03d}_round{m.round:03d}.flupd", rs)

    try:
        res = run_experiment(cfg, repeat, on_round=on_round)
    except Exception as exc:  # reported by the caller as exit 3
        return {"repeat": repeat, "rows": rows, "error": f"{type(exc).__name__}: {exc}"}
    return {
        "repeat": repeat,
        "rows": rows,
        "error": None,
        "seed": res.seed,
        "malicious": list(res.malicious),
        "acc": res.final.acc,
        "asr": res.final.asr,
        "detection_rate": res.detection_rate,
        "awp_max_ratio": res.awp_max_ratio,
    }


def _run_jobs(jobs, threads: int) -> list[dict]:
    """Run ``(cfg, repeat, dump_dir)`` jobs on a bounded pool, results in job order."""
    if threads <= 1 or len(jobs) <= 1:
        return [_run_repeat(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
        futures = [ex.submit(_run_repeat, *j) for j in jobs]
        return [f.result() for f in futures]


def summarize(cfg: ExperimentConfig, results: list[dict]) -> dict:
    done = [r for r in results if r["error"] is None]
    errors = [{"repeat": r["repeat"], "error": r["error"]} for r in results if r["error"] is not None]
    return {
        "schema_version": SCHEMA_VERSION,
        "status": "ok" if not errors else "failed",
        "errors": errors,
        "repeats": cfg.run.repeats,
        "completed": len(done),
        "acc": _mean_std(r["acc"] for r in done),
        "asr": _mean_std(r["asr"] for r in done),
        "detection_rate": _mean_std(r["detection_rate"] for r in done),
        "per_repeat": [
            {k: r[k] for k in ("repeat", "seed", "malicious", "acc", "asr", "detection_rate", "awp_max_ratio")}
            for r in done
        ],
        "config": cfg.to_dict(),
    }


def write_simulation(out_dir: Path, cfg: ExperimentConfig, results: list[dict]) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [{k: _fmt(v) for k, v in row.items()} for r in results for row in r["rows"]]
    write_text(out_dir / "rounds.csv", csv_text(ROUND_COLUMNS, rows))
    write_text(out_dir / "config.txt", cfg.to_text())
    summary = summarize(cfg, results)
    write_json(out_dir / "summary.json", summary)
    return summary


def simulate(cfg: ExperimentConfig, out_dir: Path, threads: int = 1, dump_updates: bool = False) -> dict:
    dump_dir = None
    if dump_updates:
        dump_dir = out_dir / "updates"
        dump_dir.mkdir(parents=True, exist_ok=True)
        dump_dir = str(dump_dir)
    jobs = [(cfg, r, dump_dir) for r in range(cfg.run.repeats)]
    return write_simulation(out_dir, cfg, _run_jobs(jobs, threads))


def _apply_globals(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = cfg.with_value("run.seed", args.seed)
    if args.out_dir is not None:
        cfg = cfg.with_value("run.out_dir", args.out_dir)
    if args.threads is not None:
        cfg = cfg.with_value("run.threads", args.threads)
    if args.dump_updates:
        cfg = cfg.with_value("run.dump_updates", True)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _apply_globals(load_config(args.config), args)
    summary = simulate(cfg, Path(cfg.run.out_dir), cfg.run.threads, cfg.run.dump_updates)
    print(json.dumps({k: summary[k] for k in ("status", "acc", "asr", "detection_rate")}))
    if summary["status"] != "ok":
        for e in summary["errors"]:
            print(f"error: repeat {e['repeat']}: {e['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ------------------------------------------------------------------ sweep


def cmd_sweep(args) -> int:
    base = _apply_globals(load_config(args.config), args)
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("sweep needs a non-empty --values list")
    out = Path(base.run.out_dir)
    cfgs = []
    for raw in values:
        try:
            parsed = json.loads(raw)
        except json.JSONDecodeError:
            parsed = raw.strip()
        cfgs.append((raw.strip(), base.with_value(args.param, parsed)))
    jobs, owners = [], []
    for label, cfg in cfgs:
        point = out / f"{args.param}={label}"
        dump = None
        if cfg.run.dump_updates:
            (point / "updates").mkdir(parents=True, exist_ok=True)
            dump = str(point / "updates")
        for r in range(cfg.run.repeats):
            jobs.append((cfg, r, dump))
            owners.append(label)
    results = _run_jobs(jobs, base.run.threads)
    rows, status = [], EXIT_OK
    for label, cfg in cfgs:
        mine = [res for res, o in zip(results, owners) if o == label]
        summary = write_simulation(out / f"{args.param}={label}", cfg, mine)
        if summary["status"] != "ok":
            status = EXIT_RUNTIME
        acc, asr, det = summary["acc"] or {}, summary["asr"] or {}, summary["detection_rate"] or {}
        rows.append(
            {
                "schema_version": SCHEMA_VERSION,
                "param": args.param,
                "value": label,
                "acc_mean": _fmt(acc.get("mean")),
                "acc_std": _fmt(acc.get("std")),
                "asr_mean": _fmt(asr.get("mean")),
                "asr_std": _fmt(asr.get("std")),
                "detection_rate_mean": _fmt(det.get("mean")),
            }
        )
    text = csv_text(SWEEP_COLUMNS, rows)
    write_text(out / "sweep.csv", text)
    sys.stdout.write(text)
    return status


# ------------------------------------------------------------------ theory


def theory_rows(grid, samples: int, seed: int, bound_dims: int | None = None) -> list[dict]:
    """One row per ``delta/sigma``: closed form, Monte Carlo estimate and optional set bound.

    The bound column uses ``bound_dims`` coordinates with ``sigma = 1`` and
    ``delta`` equal to the row value; it stays empty without ``bound_dims`` or at 0.
    """
    rows = []
    for k, ratio in enumerate(grid):
        spec = GaussianDemoSpec(np.zeros(1), np.ones(1), np.array([ratio]))
        p_mc, se = mc_error_prob(spec, samples=samples, rng=np.random.default_rng([seed, k]))
        bound = None
        if bound_dims and ratio != 0:
            bspec = GaussianDemoSpec(np.zeros(bound_dims), np.ones(bound_dims), np.full(bound_dims, ratio))
            bound = set_error_bound(bspec)
        rows.append(
            {
                "delta_over_sigma": ratio,
                "analytic_p": single_dim_error_prob(ratio, 1.0),
                "mc_p": p_mc,
                "mc_stderr": se,
                "chebyshev_bound": bound,
            }
        )
    return rows


def cmd_theory(args) -> int:
    grid = parse_floats(args.grid)
    if not grid or any(not math.isfinite(g) for g in grid):
        raise UsageError("--grid needs at least one finite value")
    if args.bound_dims is not None and args.bound_dims < 1:
        raise UsageError("--bound-dims must be positive")
    rows = theory_rows(grid, args.samples, args.seed or 0, args.bound_dims)
    text = csv_text(THEORY_COLUMNS, [{k: _fmt(v) for k, v in r.items()} for r in rows])
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "theory.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ indicators


def cmd_indicators(args) -> int:
    fractions = parse_floats(args.fractions)
    if args.dump is not None:
        rs = read_flupd(args.dump)
        source = {"dump": str(args.dump)}
    else:
        spec = GaussianDemoSpec.sparse(args.demo_dim, args.demo_support, args.demo_strength)
        rs = sample_demo_round(spec, args.demo_n, args.backdoor_index, np.random.default_rng(args.seed or 0))
        source = {
            "demo": {"dim": args.demo_dim, "support": args.demo_support, "strength": args.demo_strength, "n": args.demo_n},
            "seed": args.seed or 0,
        }
    report = indicators(rs, args.backdoor_index, fractions)
    rows = [{"schema_version": SCHEMA_VERSION, **r} for r in report.rows()]
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    text = csv_text(INDICATOR_COLUMNS, [{k: _fmt(v) for k, v in r.items()} for r in rows])
    write_text(out / "indicators.csv", text)
    write_json(
        out / "indicators.json",
        {"schema_version": SCHEMA_VERSION, "backdoor_index": args.backdoor_index, **source, "rows": rows},
    )
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # shared by the top level and each subcommand; SUPPRESS keeps a subcommand
    # from resetting a flag that was given before it
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d, help="master seed (overrides run.seed)")
    p.add_argument("--out-dir", default=d, help="output directory (overrides run.out_dir)")
    p.add_argument("--threads", type=int, default=d, help="worker processes for repeats and sweep points")
    p.add_argument(
        "--dump-updates", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="write every round's client updates as FLUPD1 files",
    )
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimkrum", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags(True)]

    p = sub.add_parser("simulate", parents=common, help="run a federated experiment from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("theory", parents=common, help="single-dimension error table with Monte Carlo check")
    p.add_argument("--grid", default="0,0.5,1,2,4", help="comma-separated delta/sigma values")
    p.add_argument("--samples", type=int, default=10**6)
    p.add_argument("--bound-dims", type=int, default=None, help="add the set bound for this many equal coordinates")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("indicators", parents=common, help="detectability indicators per fraction of dimensions")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dump", type=Path, help="FLUPD1 update dump")
    src.add_argument("--demo", action="store_true", help="sample a sparse-shift Gaussian demo round")
    p.add_argument("--backdoor-index", type=int, default=0)
    p.add_argument("--fractions", default="0.001,0.01,0.1,1")
    p.add_argument("--demo-dim", type=int, default=10_000)
    p.add_argument("--demo-support", type=int, default=10)
    p.add_argument("--demo-strength", type=float, default=3.1)
    p.add_argument("--demo-n", type=int, default=10)
    p.set_defaults(func=cmd_indicators)

    p = sub.add_parser("sweep", parents=common, help="run one simulation per value of a config key")
    p.add_argument("config")
    p.add_argument("--param", required=True, help="dotted config key, e.g. aggregator.rho")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
