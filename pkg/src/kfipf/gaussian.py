"""Gaussian moment algebra shared by every filter.

Functions accept stacks of vectors/matrices (leading batch axes) so a whole
particle bank is processed in one call. SPD repair lives in :func:`spd_sqrt`
and nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = np.log(2.0 * np.pi)
JITTER_LADDER = tuple(10.0 ** -e for e in range(12, 5, -1))  # 1e-12 ... 1e-6


class SPDRepairError(np.linalg.LinAlgError):
    """Cholesky failed even after the largest jitter."""

    def __init__(self, msg, epsilon, index=None):
        super().__init__(msg)
        self.epsilon = epsilon
        self.index = index


class ConditioningError(np.linalg.LinAlgError):
    pass


@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class JointMoments:
    mean_x: np.ndarray
    mean_y: np.ndarray
    P_x: np.ndarray
    P_y: np.ndarray
    P_xy: np.ndarray

    def block_cov(self) -> np.ndarray:
        top = np.concatenate([self.P_x, self.P_xy], axis=-1)
        bottom = np.concatenate([np.swapaxes(self.P_xy, -1, -2), self.P_y], axis=-1)
        return np.concatenate([top, bottom], axis=-2)


def symmetrize(P):
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def _chol_one(P):
    """Cholesky of one symmetric matrix with the escalating jitter ladder.

    Returns ``(L, eps)``; ``eps`` is the jitter that succeeded (0.0 if none
    was needed) or ``None`` on failure.
    """
    if not np.all(np.isfinite(P)):
        return None, None
    try:
        return np.linalg.cholesky(P), 0.0
    except np.linalg.LinAlgError:
        pass
    n = P.shape[-1]
    scale = np.trace(P) / n
    if scale <= 0.0:
        if not np.any(P):
            return np.zeros_like(P), 0.0
        return None, None
    eye = np.eye(n)
    for eps in JITTER_LADDER:
        try:
            return np.linalg.cholesky(P + eps * scale * eye), eps
        except np.linalg.LinAlgError:
            continue
    return None, None


def chol_with_mask(P):
    """Batched SPD square root that reports failures instead of raising.

    Returns ``(L, ok)`` where ``ok`` has the batch shape; failed entries of
    ``L`` are zero.
    """
    P = symmetrize(np.asarray(P, dtype=float))
    try:
        L = np.linalg.cholesky(P)
        if np.all(np.isfinite(L)):
            return L, np.ones(P.shape[:-2], dtype=bool)
    except np.linalg.LinAlgError:
        pass
    batch = P.shape[:-2]
    flat = P.reshape((-1,) + P.shape[-2:])
    L = np.zeros_like(flat)
    ok = np.zeros(len(flat), dtype=bool)
    for i, Pi in enumerate(flat):
        Li, eps = _chol_one(Pi)
        if eps is not None:
            L[i], ok[i] = Li, True
    return L.reshape(P.shape), ok.reshape(batch)


def spd_sqrt(P):
    """Lower Cholesky factor of the symmetrized ``P`` with jitter repair.

    On failure the jitter ``eps * trace(P)/n * I`` escalates from 1e-12 to
    1e-6; an exact zero matrix has the zero factor.
    """
    L, ok = chol_with_mask(P)
    if not np.all(ok):
        idx = np.argwhere(~np.atleast_1d(ok))[0]
        raise SPDRepairError(
            f"matrix not SPD after jitter {JITTER_LADDER[-1]:g} (batch index {tuple(idx)})",
            epsilon=JITTER_LADDER[-1],
            index=tuple(idx),
        )
    return L


def _solve_lower(L, B):
    if L.ndim == 2:
        # one shared factor: a single triangular solve over all right-hand sides
        Bm = np.moveaxis(B, -2, 0)
        X = solve_triangular(L, Bm.reshape(L.shape[0], -1), lower=True, check_finite=False)
        return np.moveaxis(X.reshape(Bm.shape), 0, -2)
    # numpy has no batched triangular solve; LU on a triangular matrix is exact enough
    return np.linalg.solve(L, B)


def whitened_condition(mean_x, mean_y, P_x, P_y, P_xy, y):
    """Condition through the Cholesky factor ``Ly`` of ``P_y`` without raising.

    Returns ``(mean, cov, loglik, ok)`` where ``loglik = log N(y; mean_y, P_y)``
    and ``ok`` flags batch entries whose ``P_y`` could be factorized.
    """
    Ly, ok = chol_with_mask(P_y)
    if not np.all(ok):
        Ly = np.where(ok[..., None, None], Ly, np.eye(Ly.shape[-1]))
    innov = np.asarray(y, dtype=float) - mean_y
    rhs = np.concatenate(
        [np.swapaxes(P_xy, -1, -2), np.broadcast_to(innov[..., None], P_y.shape[:-1] + (1,))], axis=-1
    )
    W = _solve_lower(Ly, rhs)
    A, e = W[..., :-1], W[..., -1]
    mean = mean_x + np.einsum("...mn,...m->...n", A, e)
    cov = symmetrize(P_x - np.swapaxes(A, -1, -2) @ A)
    logdet = np.sum(np.log(np.diagonal(Ly, axis1=-2, axis2=-1)), axis=-1)
    loglik = -0.5 * e.shape[-1] * LOG_2PI - logdet - 0.5 * np.sum(e * e, axis=-1)
    return mean, cov, loglik, ok


def conditional_update(joint: JointMoments, y) -> GaussianMoments:
    """Condition the x-block of a joint Gaussian on an observed y.

    mean = m_x + P_xy P_y^{-1} (y - m_y), cov = P_x - P_xy P_y^{-1} P_xy^T,
    evaluated in whitened form through the Cholesky factor of P_y.
    """
    mean, cov, _, ok = whitened_condition(joint.mean_x, joint.mean_y, joint.P_x, joint.P_y, joint.P_xy, y)
    if not np.all(ok):
        raise ConditioningError(f"innovation covariance is singular after jitter {JITTER_LADDER[-1]:g}")
    return GaussianMoments(mean=mean, cov=cov)


def logpdf_chol(x, mean, L):
    """Gaussian log-density given the Cholesky factor ``L`` of the covariance."""
    d = np.asarray(x, dtype=float) - mean
    n = d.shape[-1]
    z = _solve_lower(L, d[..., None])[..., 0]
    logdet = np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * n * LOG_2PI - logdet - 0.5 * np.sum(z * z, axis=-1)


def gaussian_logpdf(x, moments: GaussianMoments):
    return logpdf_chol(x, moments.mean, spd_sqrt(moments.cov))


def gaussian_case_study_sample(moments: GaussianMoments, xi):
    """Map a reference draw through ``X(xi) = mean + sqrt(cov) xi``."""
    L = spd_sqrt(moments.cov)
    return moments.mean + np.einsum("...ij,...j->...i", L, np.asarray(xi, dtype=float))
