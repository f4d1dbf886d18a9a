"""Implicit importance sampling.

Two routes live here. The Kalman-bank route maps a reference draw through
the per-particle updated Gaussian and weights by the predictive likelihood.
The iterative route minimizes ``F_i(X) = -log p(y|X) p(X|x_prev)`` with
Gauss-Newton and then solves ``F_i(X) - min F_i = s(xi) - min s`` along the
ray ``mu + lam * L xi``.

Everything is batched over particles: ``x_prev`` of shape ``(B, n)`` gives
``B`` independent targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .gaussian import LOG_2PI, chol_with_mask, spd_sqrt, symmetrize
from .kfbank import jacobian
from .models import StateSpaceModel


class TotalDegeneracyError(FloatingPointError):
    """Every importance weight is zero."""


# ------------------------------------------------------------ reference draws


@dataclass
class ReferenceSampler:
    """Draws ``xi ~ N(0, alpha I)``; small alpha keeps draws near the mode of N(0, I)."""

    dim: int
    alpha: float
    rng: np.random.Generator

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def sample_reference(sampler: ReferenceSampler, size=None):
    shape = (sampler.dim,) if size is None else (size, sampler.dim)
    z = sampler.rng.standard_normal(shape)
    return np.sqrt(sampler.alpha) * z


def map_particle(moments, xi, L=None):
    """``x = mean + sqrt(cov) xi`` (lower Cholesky square root)."""
    if L is None:
        L = spd_sqrt(moments.cov)
    return moments.mean + np.einsum("...ij,...j->...i", L, np.asarray(xi, dtype=float))


# ------------------------------------------------------------------ weights


def ipf_log_weight(w_prev_log, pred, y):
    from .kfbank import predictive_loglik

    ll = predictive_loglik(pred, y)
    return np.asarray(w_prev_log) + ll


def normalize_weights(log_weights):
    """Log-sum-exp normalization; ``-inf`` entries map to weight 0."""
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise ValueError("log weights must be finite or -inf")
    if not np.any(finite):
        raise TotalDegeneracyError("all importance weights are zero")
    c = lw[finite].max()
    w = np.exp(lw - c)
    return w / w.sum()


# --------------------------------------------------------------- log target


def _quad(r, W):
    """``r^T W r / 2`` over the last axis."""
    return 0.5 * np.sum((r @ W) * r, axis=-1)


class LogTarget:
    """``F_i(X) = 1/2 |y - h(X)|^2_{R^-1} + 1/2 |X - f(x_prev)|^2_{Q^-1} + const``.

    Gaussian surrogates N(f(x_prev), Q) and N(h(X), R) stand in for the
    transition and measurement densities; the constant makes ``exp(-F)``
    their actual product. ``x_prev`` is a bank ``(B, n)``. Methods take
    ``X`` of shape ``(B, n)``, or points for a subset of particles together
    with ``rows`` naming the particle behind each point.
    """

    def __init__(self, model: StateSpaceModel, x_prev, y, analytic_jacobians: bool = False):
        self.model = model
        self.x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
        self.y = np.asarray(y, dtype=float)
        self.fx = model.f(self.x_prev)
        self.analytic = analytic_jacobians and model.h_jac is not None
        self.LQ = np.linalg.cholesky(model.Q)
        self.LR = np.linalg.cholesky(model.R)
        self.Qinv = symmetrize(np.linalg.solve(model.Q, np.eye(model.n_x)))
        self.Rinv = symmetrize(np.linalg.solve(model.R, np.eye(model.n_y)))
        self.const = (
            0.5 * (model.n_x + model.n_y) * LOG_2PI
            + np.sum(np.log(np.diag(self.LQ)))
            + np.sum(np.log(np.diag(self.LR)))
        )

    @property
    def batch(self) -> int:
        return self.x_prev.shape[0]

    def _parts(self, X, rows=None):
        fx = self.fx if rows is None else self.fx[rows]
        return self.y - self.model.h(X), X - fx

    def eval(self, X, rows=None):
        ry, rx = self._parts(X, rows)
        return _quad(ry, self.Rinv) + _quad(rx, self.Qinv) + self.const

    def h_jacobian(self, X):
        if self.analytic:
            return self.model.h_jac(X)
        return jacobian(self.model.h, X)

    def grad(self, X, rows=None):
        ry, rx = self._parts(X, rows)
        Hj = self.h_jacobian(X)
        return rx @ self.Qinv - np.einsum("...ji,...j->...i", Hj, ry @ self.Rinv)

    def gn_hessian(self, X):
        Hj = self.h_jacobian(X)
        return symmetrize(np.swapaxes(Hj, -1, -2) @ (self.Rinv @ Hj) + self.Qinv)

    def directional_derivative(self, X, d, rows=None):
        """``grad F(X) . d`` with a central difference of h along ``d``."""
        ry, rx = self._parts(X, rows)
        scale = 1e-6 * np.maximum(1.0, np.max(np.abs(X), axis=-1, keepdims=True))
        eps = scale / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)
        Jd = (self.model.h(X + eps * d) - self.model.h(X - eps * d)) / (2 * eps)
        return np.sum((rx @ self.Qinv) * d, axis=-1) - np.sum((ry @ self.Rinv) * Jd, axis=-1)

    def grad_and_hessian(self, X, rows=None):
        """Gradient and Gauss-Newton Hessian sharing one Jacobian of h."""
        ry, rx = self._parts(X, rows)
        Hj = self.h_jacobian(X)
        RH = self.Rinv @ Hj
        g = rx @ self.Qinv - np.einsum("...ji,...j->...i", RH, ry)
        H = np.swapaxes(Hj, -1, -2) @ RH + self.Qinv
        return g, symmetrize(H)


class TargetMinimum(NamedTuple):
    mu: np.ndarray
    phi: np.ndarray
    hessian: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def minimize_log_target(target: LogTarget, x_init=None, gtol=1e-8, max_iter=100, c_armijo=1e-4):
    """Gauss-Newton with halving Armijo backtracking, batched over particles.

    ``x_init`` defaults to the prior mode ``f(x_prev)``. Returns the
    minimizers, the minimum values (constant included), the Gauss-Newton
    Hessians there, and per-particle iteration counts / convergence flags.
    A particle stops at ``max|grad| < gtol``, after ``max_iter`` iterations,
    or when the line search cannot decrease F any further.
    """
    X = np.array(target.fx if x_init is None else x_init, dtype=float, copy=True)
    B = X.shape[0]
    Fx = target.eval(X)
    g, H = target.grad_and_hessian(X)
    its = np.zeros(B, dtype=int)
    converged = np.max(np.abs(g), axis=-1) < gtol
    active = ~converged
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        Xa, Fa, ga = X[idx], Fx[idx], g[idx]
        p = -np.linalg.solve(H[idx], ga[..., None])[..., 0]
        slope = np.sum(ga * p, axis=-1)
        # slack keeps the test meaningful once decreases drop below F's rounding
        slack = 16 * np.finfo(float).eps * (1.0 + np.abs(Fa))
        t = np.ones(len(idx))
        pending = np.arange(len(idx))
        for _ in range(30):
            trial = Xa[pending] + t[pending, None] * p[pending]
            Ft = target.eval(trial, idx[pending])
            ok = Ft <= Fa[pending] + c_armijo * t[pending] * slope[pending] + slack[pending]
            acc = pending[ok]
            Xa[acc], Fa[acc] = trial[ok], Ft[ok]
            pending = pending[~ok]
            t[pending] *= 0.5
            if len(pending) == 0:
                break
        X[idx], Fx[idx] = Xa, Fa
        its[idx] += 1
        g[idx], H[idx] = target.grad_and_hessian(Xa, idx)
        converged[idx] = np.max(np.abs(g[idx]), axis=-1) < gtol
        active[idx] = ~converged[idx]
        active[idx[pending]] = False
    return TargetMinimum(X, Fx, H, its, converged)


# --------------------------------------------------------------- random map


@dataclass
class ImplicitSolution:
    x: np.ndarray
    phi: np.ndarray
    log_jacobian: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    lam: np.ndarray
    residual: np.ndarray
    mode_cov: Optional[np.ndarray] = None


def _solve_lambda(target, rows, mu, phi, d, rho, lam0, tol=1e-10, max_iter=100, lam_max=1e8):
    """Solve ``F(mu + lam d) - phi = rho`` for lam > 0 on a flat set of rays.

    ``rows[r]`` is the particle owning ray ``r``. The residual is negative at
    lam = 0; the bracket ``[lo, hi]`` starts open above and tightens as signs
    are observed. Newton steps that leave the bracket are replaced by doubling
    (no upper end yet) or bisection. Newton keeps polishing after the
    tolerance is met until the step stalls, because the finite-difference
    Jacobian of the map needs lam to near machine precision.
    """
    M = len(rho)
    lo = np.zeros(M)
    hi = np.full(M, np.inf)
    lam = np.asarray(lam0, dtype=float).copy()
    lam[~(lam > 0)] = 1.0
    its = np.zeros(M, dtype=int)
    done = np.zeros(M, dtype=bool)
    failed = np.zeros(M, dtype=bool)
    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if len(act) == 0:
            break
        la, ra = lam[act], rows[act]
        X = mu[act] + la[:, None] * d[act]
        r = target.eval(X, ra) - phi[act] - rho[act]
        its[act] += 1
        lo_a = np.where(r < 0, la, lo[act])
        hi_a = np.where(r > 0, la, hi[act])
        lo[act], hi[act] = lo_a, hi_a
        dr = target.directional_derivative(X, d[act], ra)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = la - r / dr
        ulp = 1e-15 * np.maximum(1.0, la)
        stop = (np.abs(r) < tol) & ((np.abs(newton - la) <= 1e2 * ulp) | (hi_a - lo_a <= 1e2 * ulp) | (r == 0))
        bad = ~np.isfinite(newton) | (newton <= lo_a) | (newton >= hi_a)
        fallback = np.where(np.isfinite(hi_a), 0.5 * (lo_a + hi_a), 2.0 * np.maximum(la, 1.0))
        nxt = np.where(bad, fallback, newton)
        blown = ~np.isfinite(r) | (nxt > lam_max)
        lam[act] = np.where(stop | blown, la, nxt)
        done[act] = stop | blown
        failed[act] = blown
    X = mu + lam[:, None] * d
    res = target.eval(X, rows) - phi - rho
    converged = ~failed & (np.abs(res) < tol)
    return lam, res, its, converged


def random_map_solve(target: LogTarget, mu, phi, xi, alpha, hessian=None, fd_step=1e-6, tol=1e-10):
    """Place particles with the random map ``X = mu + lam L xi``.

    ``L`` is the lower Cholesky factor of the inverse Gauss-Newton Hessian at
    ``mu`` and ``lam`` solves ``F(X) - phi = |xi|^2 / (2 alpha)``. The log
    determinant of ``dX/dxi`` comes from central differences of the full map.
    Draws with ``|xi| < 1e-14`` return ``mu`` and the Jacobian of the local
    quadratic model, ``L / sqrt(alpha)``.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    B, n = mu.shape
    if hessian is None:
        hessian = target.gn_hessian(mu)
    Hinv = symmetrize(np.linalg.solve(hessian, np.broadcast_to(np.eye(n), hessian.shape)))
    L, ok = chol_with_mask(Hinv)
    diagL = np.where(ok[:, None], np.diagonal(L, axis1=-2, axis2=-1), 1.0)
    logdetL = np.sum(np.log(diagL), axis=-1)

    degenerate = np.linalg.norm(xi, axis=-1) < 1e-14
    d = np.einsum("bij,bj->bi", L, xi)
    rho = 0.5 * np.sum(xi * xi, axis=-1) / alpha
    rows = np.arange(B)
    lam = np.full(B, 1.0 / np.sqrt(alpha))
    res = np.zeros(B)
    its = np.zeros(B, dtype=int)
    conv = ok.copy()
    solve = np.flatnonzero(~degenerate & ok)
    if len(solve):
        ls, rs, it, cs = _solve_lambda(target, rows[solve], mu[solve], phi[solve], d[solve], rho[solve], lam[solve], tol=tol)
        lam[solve], res[solve], its[solve], conv[solve] = ls, rs, it, cs
    x = mu + lam[:, None] * d

    logJ = np.where(ok, logdetL - 0.5 * n * np.log(alpha), -np.inf)
    fd = np.flatnonzero(~degenerate & conv)
    if len(fd):
        xs = xi[fd]
        delta = fd_step * np.maximum(1.0, np.abs(xs))  # (b, n)
        E = np.eye(n)[None] * delta[:, :, None]  # row j = delta_j e_j
        xp = np.concatenate([xs[:, None, :] + E, xs[:, None, :] - E], axis=1)  # (b, 2n, n)
        dp = np.einsum("bij,bkj->bki", L[fd], xp)
        rhop = 0.5 * np.sum(xp * xp, axis=-1) / alpha
        b = len(fd)
        rrows = np.repeat(fd, 2 * n)
        lp, _, _, cp = _solve_lambda(
            target,
            rrows,
            np.repeat(mu[fd], 2 * n, axis=0),
            np.repeat(phi[fd], 2 * n),
            dp.reshape(-1, n),
            rhop.reshape(-1),
            np.repeat(lam[fd], 2 * n),
            tol=tol,
        )
        Xp = mu[fd][:, None, :] + lp.reshape(b, 2 * n)[..., None] * dp
        # column j of dX/dxi; stored as rows, the determinant is unchanged
        J = (Xp[:, :n, :] - Xp[:, n:, :]) / (2.0 * delta[:, :, None])
        sign, ld = np.linalg.slogdet(J)
        good = np.all(cp.reshape(b, 2 * n), axis=1) & (sign != 0)
        logJ[fd] = np.where(good, ld, -np.inf)
        conv[fd] &= good
    return ImplicitSolution(x=x, phi=phi, log_jacobian=logJ, iterations=its, converged=conv, lam=lam, residual=res, mode_cov=Hinv)
