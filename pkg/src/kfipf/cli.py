"""Command line entry point: ``kfipf simulate | run | compare``.

Exit status: 0 success, 2 configuration error, 3 filter failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import bench
from .filters import FilterFatalError, FilterKind
from .models import config_dict, save_trajectory

EXIT_OK, EXIT_CONFIG, EXIT_FILTER, EXIT_IO = 0, 2, 3, 4


def _config(path) -> bench.ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise _IOFailure(f"cannot read config {path}: {exc}") from exc
    return bench.ExperimentConfig.from_json(text)


class _IOFailure(Exception):
    pass


def _mkdir(out) -> Path:
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _IOFailure(f"cannot create output directory {p}: {exc}") from exc
    return p


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    seed = bench.truth_seed(cfg.master_seed, args.run)
    traj = bench.simulate(cfg, seed)
    out = _mkdir(args.out)
    try:
        csv_path, _ = save_trajectory(traj, out / "truth", config=config_dict(cfg.model))
    except OSError as exc:
        raise _IOFailure(f"cannot write trajectory under {out}: {exc}") from exc
    print(f"wrote {csv_path} (T={traj.T}, seed={seed})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args.config)
    try:
        kind = FilterKind(args.filter)
    except ValueError:
        raise bench.ConfigError(f"unknown filter {args.filter!r}; choose from {[k.value for k in FilterKind]}") from None
    if args.particles < 1:
        raise bench.ConfigError("--particles must be >= 1")
    if not 0 <= args.seed < 2 ** 64:
        raise bench.ConfigError("--seed must be an unsigned 64-bit integer")
    res = bench.run_single(cfg, kind, args.particles, args.seed)
    out = _mkdir(args.out)
    try:
        with open(out / "estimates.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            n = res.estimates.shape[1]
            wr.writerow(["k"] + [f"xhat_{j}" for j in range(1, n + 1)] + ["rmse"])
            for k, (row, e) in enumerate(zip(res.estimates, res.rmse), start=1):
                wr.writerow([k] + [repr(float(v)) for v in row] + [repr(float(e))])
        meta = {
            "config": cfg.to_dict(),
            "filter": kind.value,
            "N": args.particles,
            "seed": args.seed,
            "seconds": res.seconds,
            "final_rmse": float(res.rmse[-1]) if len(res.rmse) else None,
        }
        (out / "run.json").write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise _IOFailure(f"cannot write run output under {out}: {exc}") from exc
    tail = f", final RMSE {res.rmse[-1]:.4f}" if len(res.rmse) else ""
    print(f"{kind.value}({args.particles}) seed {args.seed}: {res.seconds:.2f} s{tail}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args.config)
    threads = bench.thread_cap()

    def progress(label, run, seconds):
        if not args.quiet:
            status = "failed" if seconds is None else f"{seconds:.2f} s"
            print(f"  {label} run {run + 1}/{cfg.n_mc}: {status}", file=sys.stderr)

    report = bench.run_monte_carlo(cfg, threads=threads, progress=progress)
    try:
        bench.emit_report(report, args.out)
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc
    for f in report.filters:
        ss = bench.steady_state_rmse(f, min(100, cfg.T)) if cfg.T else float("nan")
        print(f"{f.label:>12}  steady RMSE {ss:.4f}  mean {f.mean_seconds:.3f} s/run  failed {f.n_failed}/{cfg.n_mc}")
    if report.failed_filters:
        print(f"filters failing more than 10% of runs: {', '.join(report.failed_filters)}", file=sys.stderr)
        return EXIT_FILTER
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kfipf", description="Implicit particle filters on Lorenz'96.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="emit a truth trajectory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--run", type=int, default=0, help="MC run index whose truth seed to use")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="one filter run")
    r.add_argument("--config", required=True)
    r.add_argument("--filter", required=True, help="EPF, UPF, E-IPF, U-IPF or I-IPF")
    r.add_argument("--particles", type=int, required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="Monte Carlo comparison of the configured filters")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FilterFatalError as exc:
        print(f"filter failure: {exc}", file=sys.stderr)
        return EXIT_FILTER
    except _IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
