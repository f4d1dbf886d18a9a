"""State-space models and the Lorenz'96 benchmark system.

All model maps operate on the last axis and broadcast over any leading batch
axes, so a bank of particles of shape ``(N, n_x)`` is propagated in one call.
Storage is 0-based; the 1-based component ``x_j`` of the model equations is
``x[..., j - 1]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

ArrayMap = Callable[[np.ndarray], np.ndarray]
NoiseSampler = Callable[[np.random.Generator, tuple], np.ndarray]


class InvalidModelError(ValueError):
    """Raised when a model is constructed or evaluated with inconsistent sizes."""


@dataclass
class StateSpaceModel:
    """Additive-noise model ``x_{k+1} = f(x_k) + w_k``, ``y_k = h(x_k) + v_k``.

    ``Q`` and ``R`` are the covariances handed to the filters. The samplers
    draw the *true* noises and may follow a non-Gaussian law; each is called
    as ``sampler(rng, shape)`` and must return an array of ``shape + (dim,)``.
    ``f_jac`` / ``h_jac`` are optional analytic Jacobians (``(..., b, a)``).
    """

    n_x: int
    n_y: int
    f: ArrayMap
    h: ArrayMap
    Q: np.ndarray
    R: np.ndarray
    process_noise_sampler: Optional[NoiseSampler] = None
    measurement_noise_sampler: Optional[NoiseSampler] = None
    f_jac: Optional[ArrayMap] = None
    h_jac: Optional[ArrayMap] = None
    name: str = "model"

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.n_x < 1 or self.n_y < 1:
            raise InvalidModelError("state and measurement dimensions must be positive")
        if self.Q.shape != (self.n_x, self.n_x):
            raise InvalidModelError(f"Q has shape {self.Q.shape}, expected {(self.n_x, self.n_x)}")
        if self.R.shape != (self.n_y, self.n_y):
            raise InvalidModelError(f"R has shape {self.R.shape}, expected {(self.n_y, self.n_y)}")
        for name, M in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(M, M.T, rtol=1e-12, atol=0.0):
                raise InvalidModelError(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise InvalidModelError(f"{name} is not positive definite") from None
        if self.process_noise_sampler is None:
            self.process_noise_sampler = gaussian_sampler(self.Q)
        if self.measurement_noise_sampler is None:
            self.measurement_noise_sampler = gaussian_sampler(self.R)


def gaussian_sampler(cov):
    L = np.linalg.cholesky(np.asarray(cov, dtype=float))

    def sample(rng, shape=()):
        z = rng.standard_normal(tuple(shape) + (L.shape[0],))
        return z @ L.T

    return sample


def uniform_sampler(dim, halfwidth):
    def sample(rng, shape=()):
        return rng.uniform(-halfwidth, halfwidth, size=tuple(shape) + (dim,))

    return sample


def zero_sampler(dim):
    def sample(rng, shape=()):
        return np.zeros(tuple(shape) + (dim,))

    return sample


def linear_gaussian_model(A, H, Q, R) -> StateSpaceModel:
    """``x' = A x + w``, ``y = H x + v`` with Gaussian noises."""
    A = np.asarray(A, dtype=float)
    H = np.asarray(H, dtype=float)
    return StateSpaceModel(
        n_x=A.shape[1],
        n_y=H.shape[0],
        f=lambda x: x @ A.T,
        h=lambda x: x @ H.T,
        Q=Q,
        R=R,
        f_jac=lambda x: np.broadcast_to(A, x.shape[:-1] + A.shape),
        h_jac=lambda x: np.broadcast_to(H, x.shape[:-1] + H.shape),
        name="linear-gaussian",
    )


# ---------------------------------------------------------------- Lorenz'96


@dataclass(frozen=True)
class Lorenz96Config:
    n_x: int = 40
    F: float = 5.0
    dt: float = 0.01
    noise_halfwidth: float = 0.5

    def __post_init__(self):
        if self.n_x < 4:
            raise InvalidModelError("Lorenz'96 needs n_x >= 4 for cyclic indexing")
        if self.dt < 0:
            raise InvalidModelError("dt must be non-negative")
        if self.noise_halfwidth < 0:
            raise InvalidModelError("noise_halfwidth must be non-negative")

    @property
    def n_y(self) -> int:
        return self.n_x // 2

    @property
    def noise_variance(self) -> float:
        # variance of U(-a, a)
        return self.noise_halfwidth ** 2 / 3.0


def _check_l96_dim(x):
    if x.shape[-1] < 4:
        raise InvalidModelError(f"Lorenz'96 needs at least 4 components, got {x.shape[-1]}")


def lorenz96_drift(x, F=5.0):
    """Right-hand side ``(x_{j+1} - x_{j-2}) x_{j-1} - x_j + F`` with cyclic indices."""
    x = np.asarray(x, dtype=float)
    _check_l96_dim(x)
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return (xp1 - xm2) * xm1 - x + F


def lorenz96_drift_jacobian(x, F=5.0):
    """Dense Jacobian of :func:`lorenz96_drift`, shape ``(..., n, n)``."""
    x = np.asarray(x, dtype=float)
    _check_l96_dim(x)
    n = x.shape[-1]
    J = np.zeros(x.shape + (n,))
    j = np.arange(n)
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    J[..., j, (j + 1) % n] += xm1
    J[..., j, (j - 2) % n] -= xm1
    J[..., j, (j - 1) % n] += xp1 - xm2
    J[..., j, j] -= 1.0
    return J


def rk4_step(x, cfg: Lorenz96Config):
    """One classical RK4 step of the Lorenz'96 drift. No noise is added."""
    x = np.asarray(x, dtype=float)
    dt, F = cfg.dt, cfg.F
    h1 = lorenz96_drift(x, F)
    h2 = lorenz96_drift(x + dt * h1 / 2, F)
    h3 = lorenz96_drift(x + dt * h2 / 2, F)
    h4 = lorenz96_drift(x + dt * h3, F)
    return x + dt / 6.0 * (h1 + 2 * h2 + 2 * h3 + h4)


def rk4_jacobian(x, cfg: Lorenz96Config):
    """Jacobian of :func:`rk4_step` by the chain rule through the four stages."""
    x = np.asarray(x, dtype=float)
    _check_l96_dim(x)
    dt, F = cfg.dt, cfg.F
    eye = np.eye(x.shape[-1])
    h1 = lorenz96_drift(x, F)
    x2 = x + dt * h1 / 2
    h2 = lorenz96_drift(x2, F)
    x3 = x + dt * h2 / 2
    h3 = lorenz96_drift(x3, F)
    x4 = x + dt * h3
    K1 = lorenz96_drift_jacobian(x, F)
    K2 = lorenz96_drift_jacobian(x2, F) @ (eye + dt / 2 * K1)
    K3 = lorenz96_drift_jacobian(x3, F) @ (eye + dt / 2 * K2)
    K4 = lorenz96_drift_jacobian(x4, F) @ (eye + dt * K3)
    return eye + dt / 6.0 * (K1 + 2 * K2 + 2 * K3 + K4)


def measure(x):
    """Observe the odd (1-based) components through ``x + sin(x)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % 2:
        raise InvalidModelError(f"measurement needs an even state dimension, got {x.shape[-1]}")
    xo = x[..., 0::2]
    return xo + np.sin(xo)


def measure_jacobian(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % 2:
        raise InvalidModelError(f"measurement needs an even state dimension, got {x.shape[-1]}")
    n = x.shape[-1]
    m = n // 2
    J = np.zeros(x.shape[:-1] + (m, n))
    J[..., np.arange(m), 2 * np.arange(m)] = 1.0 + np.cos(x[..., 0::2])
    return J


def lorenz96_model(cfg: Lorenz96Config = Lorenz96Config()) -> StateSpaceModel:
    """Lorenz'96 with RK4 transition, partial ``x + sin x`` measurement, uniform noise.

    The filters see ``Q = R = (a^2 / 3) I``, the covariances of the true
    ``U(-a, a)`` noises.
    """
    if cfg.n_x % 2:
        raise InvalidModelError("Lorenz'96 benchmark needs an even n_x")
    n_x, n_y = cfg.n_x, cfg.n_y
    var = cfg.noise_variance
    if var > 0:
        Q, R = var * np.eye(n_x), var * np.eye(n_y)
        w, v = uniform_sampler(n_x, cfg.noise_halfwidth), uniform_sampler(n_y, cfg.noise_halfwidth)
    else:
        # noiseless truth still needs SPD filter covariances
        Q, R = np.eye(n_x) * 1e-6, np.eye(n_y) * 1e-6
        w, v = zero_sampler(n_x), zero_sampler(n_y)
    return StateSpaceModel(
        n_x=n_x,
        n_y=n_y,
        f=lambda x: rk4_step(x, cfg),
        h=measure,
        Q=Q,
        R=R,
        process_noise_sampler=w,
        measurement_noise_sampler=v,
        f_jac=lambda x: rk4_jacobian(x, cfg),
        h_jac=measure_jacobian,
        name="lorenz96",
    )


def lorenz96_initial_state(cfg: Lorenz96Config, rng: np.random.Generator, spinup: int = 500):
    """``F * 1`` plus a standard-normal kick, then ``spinup`` noiseless RK4 steps."""
    x = cfg.F * np.ones(cfg.n_x) + rng.standard_normal(cfg.n_x)
    for _ in range(spinup):
        x = rk4_step(x, cfg)
    return x


# -------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, n_x), k = 0..T
    measurements: np.ndarray  # (T, n_y), k = 1..T
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.measurements = np.asarray(self.measurements, dtype=float)
        if len(self.states) != len(self.measurements) + 1:
            raise ValueError(
                f"trajectory has {len(self.states)} states but {len(self.measurements)} measurements"
            )

    @property
    def T(self) -> int:
        return len(self.measurements)


def simulate_truth(model: StateSpaceModel, x0, T: int, seed) -> Trajectory:
    """Simulate ``T`` steps of the true system.

    Process and measurement noise come from independent child streams of
    ``seed``, so the states do not depend on the measurement draws.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    ss = np.random.SeedSequence(seed)
    w_rng, v_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    x = np.empty((T + 1, model.n_x))
    x[0] = x0
    w = model.process_noise_sampler(w_rng, (T,))
    v = model.measurement_noise_sampler(v_rng, (T,))
    for k in range(T):
        x[k + 1] = model.f(x[k]) + w[k]
    y = model.h(x[1:]) + v
    return Trajectory(states=x, measurements=y, seed=seed)


def save_trajectory(traj: Trajectory, path, config: Optional[dict] = None):
    """Write ``<path>.csv`` (1-based column names) plus a ``<path>.json`` sidecar."""
    path = Path(path)
    csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
    n_x, n_y = traj.states.shape[1], traj.measurements.shape[1]
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k"] + [f"x_{j}" for j in range(1, n_x + 1)] + [f"y_{l}" for l in range(1, n_y + 1)])
        for k in range(traj.T + 1):
            ys = [repr(float(v)) for v in traj.measurements[k - 1]] if k > 0 else [""] * n_y
            wr.writerow([k] + [repr(float(v)) for v in traj.states[k]] + ys)
    sidecar = {"seed": traj.seed, "T": traj.T, "n_x": n_x, "n_y": n_y, "config": config or {}}
    sidecar.update(traj.meta)
    json_path.write_text(json.dumps(sidecar, indent=2))
    return csv_path, json_path


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    n_x, n_y = meta["n_x"], meta["n_y"]
    states, meas = [], []
    with open(path.with_suffix(".csv"), newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for row in rd:
            states.append([float(v) for v in row[1 : 1 + n_x]])
            if int(row[0]) > 0:
                meas.append([float(v) for v in row[1 + n_x : 1 + n_x + n_y]])
    return Trajectory(
        states=np.array(states),
        measurements=np.array(meas).reshape(-1, n_y),
        seed=meta.get("seed"),
        meta={"config": meta.get("config", {})},
    )


def config_dict(cfg: Lorenz96Config) -> dict:
    return asdict(cfg)
