"""Regression equilibrium of wind-power forecasts in two-settlement markets."""

from .admm import AdmmResult, StepSchedule, StopRule, admm_solve
from .equilibrium import (EquilibriumSolution, GameConfig, solve_equilibrium,
                          solve_fixed_profile, verify_equilibrium)
from .evaluation import (MetricsReport, competitive_ratio, deviation_incentive,
                         dispatch_cost_report, forecast_rmse, oracle_run, regime_run)
from .experiment import ExperimentConfig, load_config, run_experiment
from .features import Dataset, KernelConfig, fit_baseline, fit_price_taker
from .io import bundled_case, load_case, load_dataset
from .market import (NetworkCase, clear_day_ahead, clear_real_time, clear_two_stage, settle)
from .qp import QPSettings, QuadraticProgram, solve_qp
from .synth import synth_wind

__version__ = "0.1.0"
