"""Monte Carlo harness for the Lorenz'96 twin experiment.

Every (filter, run) pair gets its own seed derived from the master seed, and
the truth of run ``r`` depends only on ``r``, so all filters in a report see
the same trajectories. Runs may execute in worker processes; numbers never
depend on the schedule, only the wall-clock columns do.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .filters import FilterConfig, FilterFatalError, FilterKind, init_ensemble, run_filter
from .models import Lorenz96Config, Trajectory, lorenz96_initial_state, lorenz96_model, simulate_truth

TRUTH_KEY = 0xFFFF_FFFF  # spawn-key slot for truth seeds, never a filter index
FAILURE_LIMIT = 0.10


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind
    N: int
    alpha: Optional[float] = None  # None: use the experiment-wide alpha

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", FilterKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown filter kind {self.kind!r}") from None
        if isinstance(self.N, bool) or not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ConfigError(f"particle count must be a positive integer, got {self.N!r}")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def label(self) -> str:
        return f"{self.kind.value}({self.N})"


PAPER_ROSTER = (
    FilterSpec(FilterKind.EPF, 1000),
    FilterSpec(FilterKind.EIPF, 1000),
    FilterSpec(FilterKind.UPF, 100),
    FilterSpec(FilterKind.IIPF, 100),
    FilterSpec(FilterKind.UIPF, 10),
)


@dataclass(frozen=True)
class ExperimentConfig:
    model: Lorenz96Config = Lorenz96Config()
    T: int = 500
    n_mc: int = 50
    filters: tuple = PAPER_ROSTER
    alpha: float = 0.05
    resample_threshold_frac: float = 0.5
    init_bias: Union[float, tuple] = 1.0
    init_spread: float = 1.0
    master_seed: int = 0
    spinup: int = 500
    analytic_jacobians: bool = True
    inflation: float = 1.0  # multiplicative factor on updated covariances; 1 disables

    def __post_init__(self):
        specs = tuple(f if isinstance(f, FilterSpec) else FilterSpec(*f) for f in self.filters)
        object.__setattr__(self, "filters", specs)
        if not isinstance(self.init_bias, (int, float)):
            object.__setattr__(self, "init_bias", tuple(float(b) for b in self.init_bias))
            if len(self.init_bias) != self.model.n_x:
                raise ConfigError(f"init_bias has {len(self.init_bias)} entries, expected {self.model.n_x}")
        if self.n_mc < 1:
            raise ConfigError("n_mc must be >= 1")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.spinup < 0:
            raise ConfigError("spinup must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.resample_threshold_frac < 0:
            raise ConfigError("resample_threshold_frac must be >= 0")
        if not self.inflation >= 1.0:
            raise ConfigError("inflation must be >= 1")
        if not self.init_spread > 0:
            raise ConfigError("init_spread must be positive")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        labels = [f.label for f in specs]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate filter entries: {labels}")

    def filter_config(self, spec: FilterSpec) -> FilterConfig:
        return FilterConfig(
            kind=spec.kind,
            alpha=self.alpha if spec.alpha is None else spec.alpha,
            resample_threshold_frac=self.resample_threshold_frac,
            analytic_jacobians=self.analytic_jacobians,
            inflation=self.inflation,
        )

    def bias_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.init_bias, dtype=float), (self.model.n_x,)).copy()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = [
            {"kind": f.kind.value, "N": int(f.N), **({} if f.alpha is None else {"alpha": f.alpha})}
            for f in self.filters
        ]
        d["init_bias"] = self.init_bias if isinstance(self.init_bias, (int, float)) else list(self.init_bias)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw = dict(d)
        try:
            if "model" in kw:
                kw["model"] = Lorenz96Config(**kw["model"])
            if "filters" in kw:
                kw["filters"] = tuple(FilterSpec(**f) for f in kw["filters"])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())


# ------------------------------------------------------------------- seeds


def _u64(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


def filter_seed(master_seed: int, filter_index: int, run: int) -> int:
    return _u64(np.random.SeedSequence(master_seed, spawn_key=(filter_index, run)))


def truth_seed(master_seed: int, run: int) -> int:
    return _u64(np.random.SeedSequence(master_seed, spawn_key=(TRUTH_KEY, run)))


# ---------------------------------------------------------------- metrics


def rmse_series(estimates, truth):
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"estimate shape {est.shape} does not match truth shape {tru.shape}")
    if est.ndim != 2:
        raise ValueError("expected (T, n_x) arrays")
    return np.sqrt(np.mean((est - tru) ** 2, axis=1))


def simulate(cfg: ExperimentConfig, seed: int) -> Trajectory:
    """Truth for one run: random spun-up start, then ``T`` noisy steps."""
    model = lorenz96_model(cfg.model)
    ss = np.random.SeedSequence(seed)
    init_ss, noise_ss = ss.spawn(2)
    x0 = lorenz96_initial_state(cfg.model, np.random.default_rng(init_ss), spinup=cfg.spinup)
    if cfg.T == 0:
        return Trajectory(states=x0[None], measurements=np.empty((0, cfg.model.n_y)), seed=seed)
    traj = simulate_truth(model, x0, cfg.T, _u64(noise_ss))
    traj.seed = seed
    return traj


@dataclass
class SingleRun:
    estimates: np.ndarray  # (T, n_x), k = 1..T
    rmse: np.ndarray  # (T,)
    seconds: float
    truth: Trajectory = field(repr=False)


def run_single(cfg: ExperimentConfig, kind, N: int, seed: int, truth_seed: Optional[int] = None,
               alpha: Optional[float] = None, truth: Optional[Trajectory] = None) -> SingleRun:
    """One filter run against one truth. ``truth_seed`` defaults to ``seed``.

    Timing covers ensemble initialization and filtering only.
    """
    spec = FilterSpec(kind, N, alpha)
    if truth is None:
        truth = simulate(cfg, seed if truth_seed is None else truth_seed)
    model = lorenz96_model(cfg.model)
    fcfg = cfg.filter_config(spec)
    t0 = time.perf_counter()
    ens = init_ensemble(N, truth.states[0] + cfg.bias_vector(), cfg.init_spread * np.eye(cfg.model.n_x), seed)
    out = run_filter(model, truth.measurements, ens, fcfg, seed)
    seconds = time.perf_counter() - t0
    return SingleRun(out.estimates, rmse_series(out.estimates, truth.states[1:]), seconds, truth)


# ------------------------------------------------------------ Monte Carlo


@dataclass
class FilterSummary:
    label: str
    kind: str
    N: int
    rmse_mean: np.ndarray
    rmse_std: np.ndarray
    mean_seconds: float
    seeds: list
    runs: list  # per-run RMSE series, None for failed runs
    seconds: list
    failures: dict  # run index -> message

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def failed(self) -> bool:
        """More than 10% of runs failed: the filter's report is void."""
        return self.n_failed > FAILURE_LIMIT * len(self.seeds)


@dataclass
class RunReport:
    config: ExperimentConfig
    truth_seeds: list
    filters: list  # FilterSummary, in config order
    threads: int

    def summary(self, label: str) -> FilterSummary:
        for f in self.filters:
            if f.label == label:
                return f
        raise KeyError(label)

    @property
    def failed_filters(self) -> list:
        return [f.label for f in self.filters if f.failed]


def _task(args):
    cfg, f_idx, r = args
    spec = cfg.filters[f_idx]
    try:
        res = run_single(cfg, spec.kind, spec.N, filter_seed(cfg.master_seed, f_idx, r),
                         truth_seed(cfg.master_seed, r), alpha=spec.alpha)
    except FilterFatalError as exc:
        return f_idx, r, None, None, str(exc)
    return f_idx, r, res.rmse, res.seconds, None


def thread_cap() -> int:
    raw = os.environ.get("IPF_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        v = int(raw)
    except ValueError:
        raise ConfigError(f"IPF_THREADS must be a positive integer, got {raw!r}") from None
    if v < 1:
        raise ConfigError(f"IPF_THREADS must be a positive integer, got {raw!r}")
    return v


def run_monte_carlo(cfg: ExperimentConfig, threads: Optional[int] = None, progress=None) -> RunReport:
    """``n_mc`` runs of every configured filter, aggregated per time step.

    Failed runs are recorded and left out of the mean/std band. ``threads``
    defaults to the ``IPF_THREADS`` cap; ``progress`` is called with each
    finished ``(label, run, seconds_or_None)``.
    """
    threads = thread_cap() if threads is None else threads
    tasks = [(cfg, f, r) for f in range(len(cfg.filters)) for r in range(cfg.n_mc)]
    workers = max(1, min(threads, len(tasks)))
    results = {}
    if workers == 1:
        for t in tasks:
            out = _task(t)
            results[out[:2]] = out[2:]
            if progress:
                progress(cfg.filters[out[0]].label, out[1], out[3])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_task, tasks):
                results[out[:2]] = out[2:]
                if progress:
                    progress(cfg.filters[out[0]].label, out[1], out[3])

    summaries = []
    for f_idx, spec in enumerate(cfg.filters):
        runs, secs, fails = [], [], {}
        for r in range(cfg.n_mc):
            rmse, sec, err = results[(f_idx, r)]
            runs.append(rmse)
            secs.append(sec)
            if err is not None:
                fails[r] = err
        ok = [s for s in runs if s is not None]
        if ok:
            stack = np.vstack(ok) if cfg.T else np.empty((len(ok), 0))
            mean, std = stack.mean(axis=0), stack.std(axis=0)
            mean_sec = float(np.mean([s for s in secs if s is not None]))
        else:
            mean = std = np.full(cfg.T, np.nan)
            mean_sec = float("nan")
        summaries.append(
            FilterSummary(
                label=spec.label,
                kind=spec.kind.value,
                N=int(spec.N),
                rmse_mean=mean,
                rmse_std=std,
                mean_seconds=mean_sec,
                seeds=[filter_seed(cfg.master_seed, f_idx, r) for r in range(cfg.n_mc)],
                runs=runs,
                seconds=secs,
                failures=fails,
            )
        )
    return RunReport(cfg, [truth_seed(cfg.master_seed, r) for r in range(cfg.n_mc)], summaries, workers)


# ----------------------------------------------------------------- output


def _fmt(v) -> str:
    return repr(float(v))


def rmse_csv(report: RunReport) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["k"] + [c for f in report.filters for c in (f"{f.label}_mean", f"{f.label}_std")])
    steps = report.config.T if report.filters else 0  # no filters: headers only
    for k in range(steps):
        wr.writerow([k + 1] + [_fmt(v) for f in report.filters for v in (f.rmse_mean[k], f.rmse_std[k])])
    return buf.getvalue()


def timing_csv(report: RunReport) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["filter", "N", "mean_seconds"])
    for f in report.filters:
        wr.writerow([f.kind, f.N, _fmt(f.mean_seconds)])
    return buf.getvalue()


def report_dict(report: RunReport) -> dict:
    return {
        "config": report.config.to_dict(),
        "truth_seeds": report.truth_seeds,
        "threads": report.threads,
        "filters": [
            {
                "label": f.label,
                "kind": f.kind,
                "N": f.N,
                "seeds": f.seeds,
                "mean_seconds": f.mean_seconds,
                "run_seconds": f.seconds,
                "n_failed": f.n_failed,
                "failures": {str(r): msg for r, msg in f.failures.items()},
                "report_failed": f.failed,
            }
            for f in report.filters
        ],
    }


def emit_report(report: RunReport, path) -> dict:
    """Write ``rmse.csv``, ``timing.csv`` and ``report.json`` under ``path``.

    I/O failures surface as ``OSError`` naming the offending path.
    """
    out = Path(path)
    files = {
        "rmse.csv": rmse_csv(report),
        "timing.csv": timing_csv(report),
        "report.json": json.dumps(report_dict(report), indent=2, allow_nan=True),
    }
    written = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    for name, text in files.items():
        p = out / name
        try:
            p.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {p}: {exc}") from exc
        written[name] = p
    return written


def read_report_config(path) -> ExperimentConfig:
    doc = json.loads((Path(path) / "report.json").read_text())
    return ExperimentConfig.from_dict(doc["config"])


def steady_state_rmse(summary: FilterSummary, window: int = 100) -> float:
    """Mean RMSE over the last ``window`` steps of the MC-mean series."""
    return float(np.mean(summary.rmse_mean[-window:]))


def roster(items: Sequence) -> tuple:
    """Build filter specs from ``(kind, N)`` pairs."""
    return tuple(FilterSpec(*it) for it in items)
