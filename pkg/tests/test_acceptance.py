"""Acceptance criteria, one test each. Outcomes are summarized at the end of the run.

Criteria 5 and 6 share one Monte Carlo experiment per resampling threshold
(paper roster, T = 500, 10 runs, serial so that wall-clock numbers are clean).
That fixture dominates the suite's runtime.
"""

import time

import numpy as np
import pytest

from kfipf.bench import ExperimentConfig, roster, run_monte_carlo, steady_state_rmse
from kfipf.cli import main
from kfipf.filters import (
    Ensemble,
    FilterConfig,
    FilterKind,
    advance,
    ess,
    estimate,
    init_ensemble,
    resample_if_needed,
    run_filter,
    step_rng,
    systematic_indices,
)
from kfipf.implicit import LogTarget, minimize_log_target, random_map_solve
from kfipf.kfbank import ekf_predict, jacobian, kf_update, ukf_predict
from kfipf.models import (
    Lorenz96Config,
    linear_gaussian_model,
    lorenz96_initial_state,
    lorenz96_model,
    measure,
    measure_jacobian,
    rk4_jacobian,
    rk4_step,
    simulate_truth,
)


def linear_system(seed=0, n=4, m=2):
    rng = np.random.default_rng(seed)
    A = 0.95 * np.linalg.qr(rng.normal(size=(n, n)))[0]
    H = rng.normal(size=(m, n))
    B = rng.normal(size=(n, n))
    Q = 0.1 * B @ B.T + 0.05 * np.eye(n)
    R = 0.3 * np.eye(m)
    return linear_gaussian_model(A, H, Q, R), A, H, Q, R


def closed_form_kf(A, H, Q, R, x, P, ys):
    means, covs = [], []
    for y in ys:
        x, P = A @ x, A @ P @ A.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x, P = x + K @ (y - H @ x), (np.eye(len(x)) - K @ H) @ P
        means.append(x)
        covs.append(P)
    return np.array(means), np.array(covs)


def linear_data(T, seed=0):
    model, A, H, Q, R = linear_system(seed)
    rng = np.random.default_rng(seed + 100)
    x, ys = rng.normal(size=4), []
    for _ in range(T):
        x = A @ x + rng.multivariate_normal(np.zeros(4), Q)
        ys.append(H @ x + rng.multivariate_normal(np.zeros(2), R))
    return model, closed_form_kf(A, H, Q, R, np.zeros(4), np.eye(4), ys), np.array(ys)


# ---------------------------------------------------------------- 1


def test_c1_linear_gaussian_oracle(criterion):
    t0 = time.perf_counter()
    model, (ref_m, ref_P), ys = linear_data(200)
    worst = {}
    for name, predict in (("ekf", ekf_predict), ("ukf", ukf_predict)):
        x, P, err = np.zeros(4), np.eye(4), 0.0
        for k, y in enumerate(ys):
            post = kf_update(predict(x, P, model), y)
            x, P = post.mean, post.cov
            err = max(err, np.max(np.abs(x - ref_m[k])), np.max(np.abs(P - ref_P[k])))
        worst[name] = err
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-8 and elapsed < 5.0
    criterion(1, "linear-Gaussian oracle equivalence", ok,
              f"ekf {worst['ekf']:.1e}, ukf {worst['ukf']:.1e}, {elapsed:.2f} s")
    assert ok


# ---------------------------------------------------------------- 2


def test_c2_kf_ipf_collapse(criterion):
    model, (ref_m, _), ys = linear_data(200)
    worst = {}
    for kind in (FilterKind.EIPF, FilterKind.UIPF):
        ens = Ensemble(np.zeros((5, 4)), np.full(5, -np.log(5)), np.tile(np.eye(4), (5, 1, 1)))
        run = run_filter(model, ys, ens, FilterConfig(kind, alpha=1e-12), seed=1)
        worst[kind.value] = np.max(np.abs(run.estimates - ref_m))
    ok = max(worst.values()) < 1e-6
    criterion(2, "KF-IPF collapse to the Kalman mean", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------- 3


def test_c3_implicit_map_residual(criterion):
    cfg = Lorenz96Config()
    model = lorenz96_model(cfg)
    alpha = 0.05
    residuals, converged = [], []
    for case in range(10):
        rng = np.random.default_rng(1000 + case)
        x0 = lorenz96_initial_state(cfg, rng, spinup=300)
        y = simulate_truth(model, x0, 1, 1000 + case).measurements[0]
        x_prev = x0 + rng.uniform(0.1, 1.0) * rng.normal(size=(100, 40))
        target = LogTarget(model, x_prev, y, analytic_jacobians=True)
        mode = minimize_log_target(target)
        xi = np.sqrt(alpha) * rng.standard_normal((100, 40))
        sol = random_map_solve(target, mode.mu, mode.phi, xi, alpha, hessian=mode.hessian)
        rho = 0.5 * np.sum(xi ** 2, axis=1) / alpha
        residuals.append(np.abs(target.eval(sol.x) - mode.phi - rho))
        converged.append(sol.converged & mode.converged)
    res, conv = np.concatenate(residuals), np.concatenate(converged)
    conv_rate = conv.mean()
    tight = np.mean(res[conv] < 1e-10)
    ok = conv_rate >= 0.99 and tight >= 0.999
    criterion(3, "implicit-map residual on 1000 Lorenz'96 solves", ok,
              f"converged {conv_rate:.3%}, residual < 1e-10 for {tight:.3%}, max {res[conv].max():.1e}")
    assert ok


# ---------------------------------------------------------------- 4


def test_c4_quadratic_target_law(criterion):
    model, *_ = linear_system(4, n=4, m=2)
    rng = np.random.default_rng(5)
    x_prev = np.tile(3.0 + rng.normal(size=4), (10_000, 1))
    target = LogTarget(model, x_prev, np.array([2.0, -1.0]))
    mode = minimize_log_target(target)
    xi = rng.standard_normal((10_000, 4))
    sol = random_map_solve(target, mode.mu, mode.phi, xi, 1.0, hessian=mode.hessian)
    mu, cov = mode.mu[0], np.linalg.inv(mode.hessian[0])
    mean_err = np.linalg.norm(sol.x.mean(0) - mu) / np.linalg.norm(mu)
    cov_err = np.linalg.norm(np.cov(sol.x, rowvar=False) - cov) / np.linalg.norm(cov)
    ok = mean_err < 0.02 and cov_err < 0.05
    criterion(4, "quadratic-target distributional check", ok, f"mean {mean_err:.2%}, cov {cov_err:.2%}")
    assert ok


# ------------------------------------------------------------- 5 and 6

MC_THRESHOLDS = (0.5, 1.0)


@pytest.fixture(scope="module")
def paper_reports():
    reports = {}
    for frac in MC_THRESHOLDS:
        cfg = ExperimentConfig(T=500, n_mc=10, alpha=0.05, resample_threshold_frac=frac)
        reports[frac] = run_monte_carlo(cfg, threads=1)
    return reports


def test_c5_rmse_ordering(paper_reports, criterion):
    checks, notes = [], []
    for frac, rep in paper_reports.items():
        assert not rep.failed_filters, rep.failed_filters
        ss = {f.label: steady_state_rmse(f) for f in rep.filters}
        a = ss["U-IPF(10)"] < ss["UPF(100)"]
        b = ss["E-IPF(1000)"] <= 1.05 * ss["EPF(1000)"]
        c = ss["U-IPF(10)"] < ss["I-IPF(100)"]
        checks += [a, b, c]
        notes.append(f"{frac:g}N: " + " ".join(f"{k}={v:.3f}" for k, v in ss.items())
                     + f" (a {'ok' if a else 'no'}, b {'ok' if b else 'no'}, c {'ok' if c else 'no'})")
    ok = all(checks)
    criterion(5, "steady-state RMSE ordering", ok, "; ".join(notes))
    assert ok


def test_c6_timing_ordering(paper_reports, criterion):
    rep = paper_reports[0.5]
    t = {f.label: f.mean_seconds for f in rep.filters}
    order = t["U-IPF(10)"] < t["I-IPF(100)"] < t["UPF(100)"]
    close = abs(t["E-IPF(1000)"] - t["EPF(1000)"]) <= 0.15 * t["EPF(1000)"]
    ok = order and close
    other = {f.label: f.mean_seconds for f in paper_reports[1.0].filters}
    criterion(6, "wall-clock ordering", ok,
              "0.5N: " + " ".join(f"{k}={v:.2f}s" for k, v in t.items())
              + "; 1.0N: " + " ".join(f"{k}={v:.2f}s" for k, v in other.items()))
    assert ok


# ---------------------------------------------------------------- 7


def test_c7_weight_suite(criterion):
    # normalization after every weight update, all five filters on Lorenz'96
    model = lorenz96_model()
    x0 = lorenz96_initial_state(Lorenz96Config(), np.random.default_rng(7), spinup=200)
    traj = simulate_truth(model, x0, 15, 7)
    norm_err = 0.0
    for kind in FilterKind:
        cfg = FilterConfig(kind, analytic_jacobians=True)
        ens = init_ensemble(20, x0 + 1.0, np.eye(40), 7)
        for k, y in enumerate(traj.measurements, start=1):
            rng = step_rng(7, k)
            ens = advance(ens, y, model, cfg, rng)
            norm_err = max(norm_err, abs(ens.weights.sum() - 1.0))
            ens = resample_if_needed(ens, cfg.resample_threshold_frac, rng)
    norm_ok = norm_err <= 1e-10

    ess_ok = (ess(np.full(100, 0.01)) == pytest.approx(100.0, abs=1e-10)
              and ess(np.array([0.0, 1.0, 0.0])) == 1.0
              and ess(np.array([0.5, 0.5, 0.0, 0.0])) == 2.0)

    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(10_000):
        N = int(rng.integers(1, 60))
        w = rng.dirichlet(np.full(N, rng.uniform(0.05, 5.0)))
        counts = np.bincount(systematic_indices(w, rng.uniform()), minlength=N)
        if counts.sum() != N or np.any(counts < np.floor(N * w) - 1) or np.any(counts > np.ceil(N * w) + 1):
            bad += 1
    count_ok = bad == 0

    est_err = 0.0
    for _ in range(200):
        N, n = int(rng.integers(1, 30)), int(rng.integers(1, 8))
        states = rng.normal(size=(N, n))
        w = rng.dirichlet(np.ones(N))
        ens = Ensemble(states, np.log(w), None)
        brute = [sum(w[i] * states[i, j] for i in range(N)) for j in range(n)]
        est_err = max(est_err, np.max(np.abs(estimate(ens) - brute)))
    est_ok = est_err < 1e-12

    ok = norm_ok and ess_ok and count_ok and est_ok
    criterion(7, "weight/ESS/resampling suite", ok,
              f"norm {norm_err:.1e}, ESS {'ok' if ess_ok else 'no'}, count violations {bad}/10000, estimate {est_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 8


def test_c8_compare_determinism(tmp_path, monkeypatch, criterion):
    cfg = ExperimentConfig(T=20, n_mc=3, spinup=100, master_seed=42,
                           filters=roster([("EPF", 20), ("E-IPF", 20), ("UPF", 5), ("I-IPF", 5), ("U-IPF", 4)]))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    blobs = []
    for i, threads in enumerate(("1", "1", "2", "3")):
        monkeypatch.setenv("IPF_THREADS", threads)
        out = tmp_path / f"out{i}"
        assert main(["compare", "--config", str(path), "--out", str(out), "--quiet"]) == 0
        blobs.append((out / "rmse.csv").read_bytes())
    ok = all(b == blobs[0] for b in blobs)
    criterion(8, "compare determinism across IPF_THREADS", ok, "threads 1, 1, 2, 3")
    assert ok


# ---------------------------------------------------------------- 9


def test_c9_derivatives(criterion):
    cfg = Lorenz96Config()
    model = lorenz96_model(cfg)
    x = lorenz96_initial_state(cfg, np.random.default_rng(9), spinup=500)
    states = []
    for _ in range(100):
        for _ in range(10):
            x = rk4_step(x, cfg)
        states.append(x)
    X = np.array(states)

    def rel(a, b):
        return np.max(np.abs(a - b), axis=(-2, -1)) / np.max(np.abs(b), axis=(-2, -1))

    f_err = rel(jacobian(lambda z: rk4_step(z, cfg), X), rk4_jacobian(X, cfg)).max()
    h_err = rel(jacobian(measure, X), measure_jacobian(X)).max()

    rng = np.random.default_rng(10)
    target = LogTarget(model, X[:20] + 0.3 * rng.normal(size=(20, 40)), measure(X[20]), analytic_jacobians=True)
    P = X[21:41] + 0.3 * rng.normal(size=(20, 40))
    g = target.grad(P)
    eps = 1e-6
    fd = np.empty_like(g)
    for j in range(40):
        e = np.zeros(40)
        e[j] = eps
        fd[:, j] = (target.eval(P + e) - target.eval(P - e)) / (2 * eps)
    g_err = np.max(np.linalg.norm(fd - g, axis=1) / np.linalg.norm(g, axis=1))

    ok = f_err < 1e-5 and h_err < 1e-5 and g_err < 1e-5
    criterion(9, "finite-difference derivative suite", ok,
              f"f {f_err:.1e}, h {h_err:.1e}, LogTarget gradient {g_err:.1e}")
    assert ok
