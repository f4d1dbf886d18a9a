"""Kalman-filter-based implicit particle filters and their baselines."""

from .bench import ExperimentConfig, FilterSpec, emit_report, rmse_series, run_monte_carlo, run_single
from .filters import (
    Ensemble,
    FilterConfig,
    FilterKind,
    estimate,
    filter_step,
    init_ensemble,
    run_filter,
)
from .gaussian import GaussianMoments, JointMoments, conditional_update, spd_sqrt
from .kfbank import PredictedMoments, UtParams, ekf_predict, kf_update, ukf_predict
from .models import Lorenz96Config, StateSpaceModel, linear_gaussian_model, lorenz96_model, simulate_truth

__version__ = "0.1.0"
