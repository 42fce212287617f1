"""Benchmark metrics: oracle, baseline and equilibrium regimes.

A regime is evaluated by clearing each sample sequentially: the day-ahead
market with the regime's forecasts, then the real-time market with the
realized wind. Costs are per-sample averages in $, revenues in $ per
sample, RMSE in MWh.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import EquilibriumSolution, GameConfig, verify_equilibrium
from .errors import DimensionMismatch, NonpositiveOracleRevenue, SampleMismatch
from .features import Dataset
from .market import (NetworkCase, Settlement, TwoStageClearing, clear_two_stage,
                     farm_forecasts, settle_forecasts, to_bus)
from .qp import QPSettings

ORACLE, BASELINE, EQUILIBRIUM = "oracle", "baseline", "equilibrium"


@dataclass(eq=False)
class RegimeRun:
    """Sequential clearing of one regime on one split."""

    regime: str
    clearing: TwoStageClearing
    forecast: np.ndarray  # farm MW (n, b)
    wind: np.ndarray      # farm MW (n, b)
    settlement: Settlement
    theta: np.ndarray | None = None

    @property
    def ids(self) -> np.ndarray:
        return self.clearing.ids


def regime_run(case: NetworkCase, dataset: Dataset, theta, regime: str = EQUILIBRIUM,
               settings: QPSettings | None = None, clip: bool = False) -> RegimeRun:
    """Clear every sample with the forecasts of profile ``theta``.

    ``clip`` bounds forecasts to [0, capacity] before clearing; it is off by
    default so the evaluated forecasts are exactly the linear models.
    """
    theta = np.asarray(theta, dtype=float)
    forecast = farm_forecasts(case, theta, dataset.features)
    if clip:
        forecast = np.clip(forecast, 0.0, case.wind_cap)
    return _run(case, dataset, forecast, regime, settings, theta)


def oracle_run(case: NetworkCase, dataset: Dataset,
               settings: QPSettings | None = None) -> RegimeRun:
    """Perfect-foresight clearing: forecasts equal the realizations."""
    return _run(case, dataset, dataset.wind_mw(case.wind_cap), ORACLE, settings, None)


def _run(case, dataset, forecast, regime, settings, theta):
    if dataset.n_farm != case.n_farm:
        raise DimensionMismatch("dataset and case disagree on farm count")
    wind = dataset.wind_mw(case.wind_cap)
    clr = clear_two_stage(case, to_bus(case, forecast), to_bus(case, wind), settings,
                          ids=dataset.ids)
    st = settle_forecasts(case, clr.lmp_da, clr.lmp_rt, forecast, wind, clr.decision)
    return RegimeRun(regime, clr, forecast, wind, st, theta)


def forecast_rmse(theta, dataset: Dataset, case: NetworkCase) -> float:
    """Root mean squared MW forecast error pooled over farms and samples."""
    err = farm_forecasts(case, theta, dataset.features) - dataset.wind_mw(case.wind_cap)
    return float(np.sqrt(np.mean(err ** 2)))


def cvar(errors, alpha: float = 0.1) -> float:
    """Mean of the largest ``ceil(alpha * n)`` values."""
    e = np.sort(np.asarray(errors, dtype=float).ravel())[::-1]
    if e.size == 0:
        return float("nan")
    return float(np.mean(e[: math.ceil(alpha * e.size - 1e-9)]))


@dataclass(frozen=True)
class CostReport:
    cost_total: float
    cost_da: float
    cost_rt: float | None
    cost_err_avg: float
    cost_err_signed: float
    cost_err_cvar10: float


def cost_errors(run: RegimeRun, oracle: RegimeRun) -> np.ndarray:
    """Per-sample total cost minus the oracle's, aligned by sample id."""
    if run.ids.shape != oracle.ids.shape or np.any(run.ids != oracle.ids):
        raise SampleMismatch("regime and oracle clearings cover different samples")
    return run.clearing.cost_total - oracle.clearing.cost_total


def dispatch_cost_report(run: RegimeRun, oracle: RegimeRun) -> CostReport:
    """Average costs and cost-error statistics of ``run`` against ``oracle``.

    The oracle has no real-time deviation, so its ``cost_rt`` is ``None``.
    ``cost_err_cvar10`` averages the worst tenth of absolute errors.
    """
    err = cost_errors(run, oracle)
    clr = run.clearing
    rt = None if run.regime == ORACLE else float(np.mean(clr.cost_rt))
    abs_err = np.abs(err)
    return CostReport(float(np.mean(clr.cost_total)), float(np.mean(clr.cost_da)), rt,
                      float(np.mean(abs_err)), float(np.mean(err)), cvar(abs_err, 0.1))


def competitive_ratio(revenue, oracle_revenue) -> np.ndarray | float:
    """Revenue in percent of the oracle revenue."""
    oracle_revenue = np.asarray(oracle_revenue, dtype=float)
    if np.any(oracle_revenue <= 0):
        raise NonpositiveOracleRevenue("oracle revenue must be positive")
    # divide first so equal revenues give exactly 100
    out = 100.0 * (np.asarray(revenue, dtype=float) / oracle_revenue)
    return float(out) if out.ndim == 0 else out


def deviation_incentive(sol: EquilibriumSolution, j: int, case: NetworkCase,
                        dataset: Dataset, cfg: GameConfig) -> float:
    """Extra profit farm ``j`` gains by re-fitting against the others."""
    return float(verify_equilibrium(sol, case, dataset, cfg, farms=[j]).gain[j])


# --------------------------------------------------------------------------
# report


@dataclass(eq=False)
class RegimeMetrics:
    regime: str
    split: str
    rmse: float
    costs: CostReport
    farm_revenue: np.ndarray
    farm_cr: np.ndarray
    farm_delta_r: np.ndarray
    gen_revenue: float
    demand_charge: float


def regime_metrics(run: RegimeRun, oracle: RegimeRun, split: str, delta_r=None) -> RegimeMetrics:
    rev = np.mean(run.settlement.wind_revenue, axis=0)
    oracle_rev = np.mean(oracle.settlement.wind_revenue, axis=0)
    b = rev.size
    rmse = float(np.sqrt(np.mean((run.forecast - run.wind) ** 2)))
    delta = np.full(b, np.nan) if delta_r is None else np.asarray(delta_r, dtype=float)
    return RegimeMetrics(run.regime, split, rmse, dispatch_cost_report(run, oracle), rev,
                         competitive_ratio(rev, oracle_rev), delta,
                         float(np.mean(run.settlement.gen_revenue)),
                         float(np.mean(run.settlement.demand_charge)))


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.10g}"


@dataclass(eq=False)
class MetricsReport:
    """Regime-by-split metrics with CSV renderings of both summary tables."""

    rows: list = field(default_factory=list)
    farm_labels: list = field(default_factory=list)
    config_hash: str = ""

    def get(self, regime: str, split: str) -> RegimeMetrics:
        for r in self.rows:
            if r.regime == regime and r.split == split:
                return r
        raise KeyError((regime, split))

    def revenue_csv(self) -> str:
        """Producer revenues, competitive ratios and deviation incentives."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_hash", "split", "regime", "entity", "revenue", "cr_percent",
                    "delta_r"])
        for r in self.rows:
            for j, label in enumerate(self.farm_labels):
                w.writerow([self.config_hash, r.split, r.regime, label,
                            _fmt(r.farm_revenue[j]), _fmt(r.farm_cr[j]),
                            _fmt(r.farm_delta_r[j])])
            w.writerow([self.config_hash, r.split, r.regime, "generators",
                        _fmt(r.gen_revenue), "", ""])
            w.writerow([self.config_hash, r.split, r.regime, "demands",
                        _fmt(r.demand_charge), "", ""])
        return buf.getvalue()

    def cost_csv(self) -> str:
        """Forecast errors, dispatch costs and cost errors."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config_hash", "split", "regime", "rmse_mwh", "cost_total", "cost_da",
                    "cost_rt", "cost_err_avg", "cost_err_signed", "cost_err_cvar10"])
        for r in self.rows:
            c = r.costs
            w.writerow([self.config_hash, r.split, r.regime, _fmt(r.rmse), _fmt(c.cost_total),
                        _fmt(c.cost_da), _fmt(c.cost_rt), _fmt(c.cost_err_avg),
                        _fmt(c.cost_err_signed), _fmt(c.cost_err_cvar10)])
        return buf.getvalue()
