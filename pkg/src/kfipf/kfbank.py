"""EKF / UKF prediction and update for a bank of particles.

``x_prev`` may be a single state ``(n_x,)`` or a bank ``(N, n_x)`` with
matching covariances ``(N, n_x, n_x)``; each particle runs its own filter and
no quantity is shared across the bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import (
    GaussianMoments,
    JointMoments,
    chol_with_mask,
    conditional_update,
    logpdf_chol,
    spd_sqrt,
    symmetrize,
)
from .models import StateSpaceModel


class JacobianEvaluationError(FloatingPointError):
    def __init__(self, msg, component):
        super().__init__(msg)
        self.component = component


@dataclass
class PredictedMoments:
    m_bar: np.ndarray
    P_bar: np.ndarray
    y_bar: np.ndarray
    P_y: np.ndarray
    P_xy: np.ndarray

    def joint(self) -> JointMoments:
        return JointMoments(self.m_bar, self.y_bar, self.P_bar, self.P_y, self.P_xy)


@dataclass(frozen=True)
class UtParams:
    alpha_ut: float = 1.0
    beta_ut: float = 2.0
    kappa_ut: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha_ut <= 1.0:
            raise ValueError(f"alpha_ut must lie in (0, 1], got {self.alpha_ut}")

    def lam(self, n: int) -> float:
        return self.alpha_ut ** 2 * (n + self.kappa_ut) - n

    def weights(self, n: int):
        lam = self.lam(n)
        if n + lam <= 0:
            raise ValueError(f"invalid UT parameters: n + lambda = {n + lam} <= 0")
        wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1 - self.alpha_ut ** 2 + self.beta_ut)
        return wm, wc, n + lam


def jacobian(fn, x):
    """Central-difference Jacobian ``(..., b, a)`` of a vectorized map.

    Step for component j is ``1e-6 * max(1, |x_j|)``. All 2a perturbed
    points are evaluated in a single call.
    """
    x = np.asarray(x, dtype=float)
    a = x.shape[-1]
    delta = 1e-6 * np.maximum(1.0, np.abs(x))  # (..., a)
    E = np.eye(a) * delta[..., None, :]  # row j = delta_j e_j
    pts = np.concatenate([x[..., None, :] + E, x[..., None, :] - E], axis=-2)
    out = np.asarray(fn(pts))
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        comp = int(bad[-2] % a)
        raise JacobianEvaluationError(f"non-finite map output when perturbing component {comp}", comp)
    diff = (out[..., :a, :] - out[..., a:, :]) / (2.0 * delta[..., :, None])
    return np.swapaxes(diff, -1, -2)


def _jac(model_fn, analytic, x, use_analytic):
    if use_analytic and analytic is not None:
        return np.asarray(analytic(x))
    return jacobian(model_fn, x)


def ekf_predict(x_prev, P_prev, model: StateSpaceModel, analytic_jacobians: bool = False) -> PredictedMoments:
    x_prev = np.asarray(x_prev, dtype=float)
    F = _jac(model.f, model.f_jac, x_prev, analytic_jacobians)
    m_bar = model.f(x_prev)
    P_bar = symmetrize(F @ P_prev @ np.swapaxes(F, -1, -2) + model.Q)
    H = _jac(model.h, model.h_jac, m_bar, analytic_jacobians)
    y_bar = model.h(m_bar)
    P_xy = P_bar @ np.swapaxes(H, -1, -2)
    P_y = symmetrize(H @ P_xy + model.R)
    return PredictedMoments(m_bar, P_bar, y_bar, P_y, P_xy)


def _sigma_points(mean, cov, scale, strict=True):
    if strict:
        L = spd_sqrt(cov)
    else:
        # failed particles get NaN sigma points and are flagged downstream
        L, ok = chol_with_mask(cov)
        L = np.where(ok[..., None, None], L, np.nan)
    L = L * np.sqrt(scale)
    Lt = np.swapaxes(L, -1, -2)  # rows = columns of L
    m = mean[..., None, :]
    return np.concatenate([m, m + Lt, m - Lt], axis=-2)


def _weighted_cov(Da, Db, wc):
    return np.swapaxes(Da * wc[:, None], -1, -2) @ Db


def ukf_predict(x_prev, P_prev, model: StateSpaceModel, ut: UtParams = UtParams(), strict=True) -> PredictedMoments:
    """Scaled unscented transform through f, then again from (m_bar, P_bar) through h."""
    x_prev = np.asarray(x_prev, dtype=float)
    n = x_prev.shape[-1]
    wm, wc, scale = ut.weights(n)

    X = model.f(_sigma_points(x_prev, P_prev, scale, strict))
    m_bar = np.einsum("s,...si->...i", wm, X)
    D = X - m_bar[..., None, :]
    P_bar = symmetrize(_weighted_cov(D, D, wc) + model.Q)

    S = _sigma_points(m_bar, P_bar, scale, strict)
    Y = model.h(S)
    y_bar = np.einsum("s,...si->...i", wm, Y)
    Dx = S - m_bar[..., None, :]
    Dy = Y - y_bar[..., None, :]
    P_y = symmetrize(_weighted_cov(Dy, Dy, wc) + model.R)
    P_xy = _weighted_cov(Dx, Dy, wc)
    return PredictedMoments(m_bar, P_bar, y_bar, P_y, P_xy)


def kf_update(pred: PredictedMoments, y) -> GaussianMoments:
    return conditional_update(pred.joint(), y)


def predictive_loglik(pred: PredictedMoments, y):
    """``log N(y; y_bar, P_y)``, the per-particle predictive likelihood."""
    return logpdf_chol(y, pred.y_bar, spd_sqrt(pred.P_y))


def predict(x_prev, P_prev, model, backend="ekf", ut: UtParams = UtParams(), analytic_jacobians=False):
    if backend == "ekf":
        return ekf_predict(x_prev, P_prev, model, analytic_jacobians=analytic_jacobians)
    if backend == "ukf":
        return ukf_predict(x_prev, P_prev, model, ut)
    raise ValueError(f"unknown Kalman backend {backend!r}")
