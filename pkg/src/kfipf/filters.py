"""Sequential filters sharing one ensemble representation.

E-IPF / U-IPF run a Kalman filter per particle, place each new particle at
``m_tilde + sqrt(P_tilde) xi`` with ``xi ~ N(0, alpha I)`` and weight it by the
predictive likelihood ``p(y_k | x_{k-1})``. EPF / UPF draw from the full
per-particle Kalman posterior and weight by likelihood x transition /
proposal. I-IPF solves the implicit equation numerically per particle.

Randomness: every step consumes one generator derived from
``(seed, step)``; draws are made in a single batched call with one row per
particle, so results never depend on how work is scheduled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .gaussian import LOG_2PI, chol_with_mask, logpdf_chol, whitened_condition
from .implicit import (
    LogTarget,
    TotalDegeneracyError,
    minimize_log_target,
    normalize_weights,
    random_map_solve,
)
from .kfbank import UtParams, ekf_predict, ukf_predict
from .models import StateSpaceModel


class FilterKind(str, Enum):
    EPF = "EPF"
    UPF = "UPF"
    EIPF = "E-IPF"
    UIPF = "U-IPF"
    IIPF = "I-IPF"

    @property
    def backend(self) -> Optional[str]:
        return {"EPF": "ekf", "E-IPF": "ekf", "UPF": "ukf", "U-IPF": "ukf"}.get(self.value)


@dataclass(frozen=True)
class FilterConfig:
    kind: FilterKind
    alpha: float = 0.05
    ut: UtParams = UtParams()
    resample_threshold_frac: float = 0.5
    analytic_jacobians: bool = False
    inflation: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.resample_threshold_frac < 0:
            raise ValueError("resample threshold must be non-negative")
        if self.inflation < 1.0:
            raise ValueError("inflation must be >= 1")


@dataclass
class Particle:
    state: np.ndarray
    log_weight: float
    cov: Optional[np.ndarray]


@dataclass
class Ensemble:
    """``N`` weighted particles. ``log_weights`` are kept normalized."""

    states: np.ndarray  # (N, n_x)
    log_weights: np.ndarray  # (N,)
    covs: Optional[np.ndarray]  # (N, n_x, n_x)
    step: int = 0
    resampled: bool = False
    n_failed: int = 0

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return normalize_weights(self.log_weights)

    @property
    def particles(self):
        covs = self.covs if self.covs is not None else [None] * self.N
        return [Particle(s, float(lw), c) for s, lw, c in zip(self.states, self.log_weights, covs)]


def step_rng(seed, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(step,))))


def _normalized_log(log_weights):
    w = normalize_weights(log_weights)
    with np.errstate(divide="ignore"):
        return np.log(w)


def init_ensemble(N: int, x0_est, P0, seed) -> Ensemble:
    """Draw ``N`` particles from ``N(x0_est, P0)``, each carrying ``P0``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    x0_est = np.asarray(x0_est, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    n = x0_est.shape[0]
    L, _ = chol_with_mask(P0)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xFFFF_FFFF,)))
    z = rng.standard_normal((N, n))
    states = x0_est + z @ L.T
    return Ensemble(
        states=states,
        log_weights=np.full(N, -np.log(N)),
        covs=np.broadcast_to(P0, (N, n, n)).copy(),
        step=0,
    )


# ------------------------------------------------------------ weights & co.


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return 1.0 / np.sum(w * w)


def systematic_indices(weights, u):
    """Indices for systematic resampling with offset ``u`` in [0, 1)."""
    w = np.asarray(weights, dtype=float)
    N = len(w)
    edges = np.cumsum(w)
    edges /= edges[-1]
    positions = (u + np.arange(N)) / N
    return np.minimum(np.searchsorted(edges, positions, side="right"), N - 1)


def systematic_resample(ens: Ensemble, rng: np.random.Generator) -> Ensemble:
    idx = systematic_indices(ens.weights, rng.random())
    return Ensemble(
        states=ens.states[idx],
        log_weights=np.full(ens.N, -np.log(ens.N)),
        covs=None if ens.covs is None else ens.covs[idx],
        step=ens.step,
        resampled=True,
        n_failed=ens.n_failed,
    )


def resample_if_needed(ens: Ensemble, threshold_frac: float, rng) -> Ensemble:
    """Resample when ESS < frac * N; ``frac >= 1`` resamples every step."""
    if threshold_frac >= 1.0 or ess(ens.weights) < threshold_frac * ens.N:
        return systematic_resample(ens, rng)
    return ens


def estimate(ens: Ensemble):
    return ens.weights @ ens.states


# ------------------------------------------------------------------- banks


def _bank_update(ens: Ensemble, y, model, backend, cfg: FilterConfig):
    """Per-particle Kalman predict + update.

    Returns ``(m_tilde, P_tilde, L_tilde, predictive loglik, pred mean, ok)``.
    """
    if backend == "ekf":
        pred = ekf_predict(ens.states, ens.covs, model, analytic_jacobians=cfg.analytic_jacobians)
    else:
        pred = ukf_predict(ens.states, ens.covs, model, cfg.ut, strict=False)
    m, P, ll, ok = whitened_condition(pred.m_bar, pred.y_bar, pred.P_bar, pred.P_y, pred.P_xy, y)
    if cfg.inflation != 1.0:
        P = P * cfg.inflation
    L, ok_t = chol_with_mask(P)
    ok &= ok_t & np.isfinite(ll) & np.all(np.isfinite(m), axis=-1)
    return m, P, L, ll, pred, ok


def _finish(ens: Ensemble, states, log_w, covs, ok) -> Ensemble:
    log_w = np.where(ok, log_w, -np.inf)
    n_failed = int(np.count_nonzero(~ok))
    if n_failed == ens.N:
        raise TotalDegeneracyError(f"every particle failed at step {ens.step + 1}")
    states = np.where(ok[:, None], states, ens.states)
    if covs is not None and ens.covs is not None:
        covs = np.where(ok[:, None, None], covs, ens.covs)
    return Ensemble(
        states=states,
        log_weights=_normalized_log(log_w),
        covs=covs,
        step=ens.step + 1,
        n_failed=ens.n_failed + n_failed,
    )


def advance_kf_ipf(ens, y, model, backend, alpha, rng, cfg: Optional[FilterConfig] = None) -> Ensemble:
    """One KF-IPF weighting/propagation step, before any resampling."""
    cfg = cfg or FilterConfig(FilterKind.EIPF if backend == "ekf" else FilterKind.UIPF, alpha=alpha)
    m, P, L, ll, _, ok = _bank_update(ens, y, model, backend, cfg)
    xi = np.sqrt(alpha) * rng.standard_normal(ens.states.shape)
    x = m + np.einsum("nij,nj->ni", L, xi)
    return _finish(ens, x, ens.log_weights + ll, P, ok)


def proposal_logpdf(z, L):
    """``log N(m + L z; m, L L^T)`` from the standardized draw ``z``."""
    n = z.shape[-1]
    logdet = np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * n * LOG_2PI - logdet - 0.5 * np.sum(z * z, axis=-1)


def advance_pf(ens, y, model, backend, rng, cfg: Optional[FilterConfig] = None) -> Ensemble:
    """EPF / UPF: proposal N(m_tilde, P_tilde), weight p(y|x) p(x|x_prev) / q(x)."""
    cfg = cfg or FilterConfig(FilterKind.EPF if backend == "ekf" else FilterKind.UPF)
    m, P, L, _, pred, ok = _bank_update(ens, y, model, backend, cfg)
    n = ens.states.shape[1]
    z = rng.standard_normal(ens.states.shape)
    x = m + np.einsum("nij,nj->ni", L, z)
    log_q = proposal_logpdf(z, np.where(ok[:, None, None], L, np.eye(n)))
    fx = pred.m_bar if backend == "ekf" else model.f(ens.states)
    log_trans = logpdf_chol(x, fx, _chol_cached(model, "Q"))
    log_lik = logpdf_chol(y, model.h(x), _chol_cached(model, "R"))
    log_w = ens.log_weights + log_lik + log_trans - log_q
    ok &= np.isfinite(log_w)
    return _finish(ens, x, log_w, P, ok)


def advance_iipf(ens, y, model, alpha, rng, cfg: Optional[FilterConfig] = None) -> Ensemble:
    """I-IPF: Gauss-Newton mode, random-map solve, weight |J| exp(-min F)."""
    cfg = cfg or FilterConfig(FilterKind.IIPF, alpha=alpha)
    xi = np.sqrt(alpha) * rng.standard_normal(ens.states.shape)
    target = LogTarget(model, ens.states, y, analytic_jacobians=cfg.analytic_jacobians)
    mode = minimize_log_target(target)
    sol = random_map_solve(target, mode.mu, mode.phi, xi, alpha, hessian=mode.hessian)
    log_w = ens.log_weights + sol.log_jacobian - sol.phi
    ok = sol.converged & np.isfinite(log_w)
    return _finish(ens, sol.x, log_w, sol.mode_cov, ok)


def _chol_cached(model: StateSpaceModel, name: str):
    cache = model.__dict__.setdefault("_chol_cache", {})
    M = getattr(model, name)
    key = (name, id(M))
    if key not in cache:
        cache[key] = np.linalg.cholesky(M)
    return cache[key]


def advance(ens: Ensemble, y, model, cfg: FilterConfig, rng) -> Ensemble:
    kind = cfg.kind
    if kind in (FilterKind.EIPF, FilterKind.UIPF):
        return advance_kf_ipf(ens, y, model, kind.backend, cfg.alpha, rng, cfg)
    if kind in (FilterKind.EPF, FilterKind.UPF):
        return advance_pf(ens, y, model, kind.backend, rng, cfg)
    return advance_iipf(ens, y, model, cfg.alpha, rng, cfg)


def kf_ipf_step(ens, y, model, backend, alpha, rng, resample_threshold_frac=0.5, cfg=None) -> Ensemble:
    ens = advance_kf_ipf(ens, y, model, backend, alpha, rng, cfg)
    return resample_if_needed(ens, resample_threshold_frac, rng)


def ekf_pf_step(ens, y, model, rng, resample_threshold_frac=0.5, cfg=None) -> Ensemble:
    ens = advance_pf(ens, y, model, "ekf", rng, cfg)
    return resample_if_needed(ens, resample_threshold_frac, rng)


def ukf_pf_step(ens, y, model, rng, resample_threshold_frac=0.5, cfg=None) -> Ensemble:
    ens = advance_pf(ens, y, model, "ukf", rng, cfg)
    return resample_if_needed(ens, resample_threshold_frac, rng)


def iipf_step(ens, y, model, alpha, rng, resample_threshold_frac=0.5, cfg=None) -> Ensemble:
    ens = advance_iipf(ens, y, model, alpha, rng, cfg)
    return resample_if_needed(ens, resample_threshold_frac, rng)


def filter_step(ens: Ensemble, y, model, cfg: FilterConfig, rng):
    """Advance, estimate, then resample if needed. Returns ``(ensemble, estimate)``."""
    ens = advance(ens, y, model, cfg, rng)
    xhat = estimate(ens)
    return resample_if_needed(ens, cfg.resample_threshold_frac, rng), xhat


@dataclass
class FilterRun:
    estimates: np.ndarray
    ess: np.ndarray
    resampled: np.ndarray
    n_failed: int
    final: Ensemble = field(repr=False)


class FilterFatalError(RuntimeError):
    def __init__(self, msg, step):
        super().__init__(msg)
        self.step = step


def run_filter(model, measurements, ens: Ensemble, cfg: FilterConfig, seed) -> FilterRun:
    """Filter ``measurements[k-1]`` for k = 1..T; estimates are taken before resampling."""
    T = len(measurements)
    est = np.empty((T, ens.states.shape[1]))
    ess_hist = np.empty(T)
    res = np.zeros(T, dtype=bool)
    for k in range(T):
        rng = step_rng(seed, ens.step + 1)
        try:
            ens = advance(ens, measurements[k], model, cfg, rng)
        except (TotalDegeneracyError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise FilterFatalError(f"{cfg.kind.value} failed at step {k + 1}: {exc}", k + 1) from exc
        w = ens.weights
        est[k] = w @ ens.states
        ess_hist[k] = ess(w)
        ens = resample_if_needed(ens, cfg.resample_threshold_frac, rng)
        res[k] = ens.resampled
    return FilterRun(estimates=est, ess=ess_hist, resampled=res, n_failed=ens.n_failed, final=ens)


# ---------------------------------------------------------------- snapshots


def save_snapshot(ens: Ensemble, path):
    """JSON checkpoint: step, states, log weights and covariance Cholesky factors."""
    chol = None
    if ens.covs is not None:
        L, _ = chol_with_mask(ens.covs)
        chol = L.tolist()
    doc = {
        "step": ens.step,
        "states": ens.states.tolist(),
        "log_weights": [lw if np.isfinite(lw) else None for lw in ens.log_weights.tolist()],
        "cov_cholesky": chol,
    }
    Path(path).write_text(json.dumps(doc))


def load_snapshot(path) -> Ensemble:
    doc = json.loads(Path(path).read_text())
    lw = np.array([-np.inf if v is None else v for v in doc["log_weights"]], dtype=float)
    covs = None
    if doc["cov_cholesky"] is not None:
        L = np.array(doc["cov_cholesky"], dtype=float)
        covs = L @ np.swapaxes(L, -1, -2)
    return Ensemble(states=np.array(doc["states"], dtype=float), log_weights=lw, covs=covs, step=doc["step"])
