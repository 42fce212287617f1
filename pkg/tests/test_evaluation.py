import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regeq.errors import NonpositiveOracleRevenue, SampleMismatch
from regeq.evaluation import (competitive_ratio, cost_errors, cvar,
                              dispatch_cost_report, forecast_rmse, oracle_run, regime_metrics,
                              regime_run)
from regeq.features import Dataset
from regeq.io import bundled_case, load_case


@pytest.fixture(scope="module")
def three_bus():
    case = load_case(bundled_case("three_bus"))
    rng = np.random.default_rng(0)
    data = Dataset(rng.uniform(size=(40, 3)), rng.uniform(0.05, 0.95, size=(40, 2)))
    return case, data


def test_cvar_hand_values():
    assert cvar(np.arange(1, 11)) == 10.0
    assert cvar(np.arange(1, 21)) == 19.5
    assert cvar([3.0]) == 3.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=40), st.integers(0, 39),
       st.floats(0, 100))
def test_cvar_monotone_in_each_error(errors, i, bump):
    e = np.array(errors)
    i %= e.size
    up = e.copy()
    up[i] += bump
    assert cvar(up) >= cvar(e) - 1e-9
    assert cvar(e) >= np.mean(e) - 1e-9


def test_competitive_ratio_table_rows():
    assert round(competitive_ratio(1081, 1383), 1) == 78.2
    assert round(competitive_ratio(1235, 1383), 1) == 89.3
    assert competitive_ratio(1383, 1383) == 100.0
    with pytest.raises(NonpositiveOracleRevenue):
        competitive_ratio(10.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1e4), st.floats(1.0, 1e4), st.floats(0.01, 100))
def test_competitive_ratio_scale_equivariant(rev, oracle, alpha):
    assert competitive_ratio(alpha * rev, alpha * oracle) == pytest.approx(
        competitive_ratio(rev, oracle), rel=1e-12)


def test_rmse_cases(three_bus):
    case, data = three_bus
    k = data.dim
    assert forecast_rmse(np.zeros((2, k)), Dataset(data.features, np.zeros((40, 2))),
                         case) == 0.0
    shifted = Dataset(data.features, np.full((40, 2), 0.5))
    theta = np.zeros((2, k))
    # forecasts of zero against 0.5 pu of 60 MW: every error is 30 MW
    assert forecast_rmse(theta, shifted, case) == pytest.approx(30.0)


def test_oracle_has_no_real_time_cost(three_bus):
    case, data = three_bus
    oracle = oracle_run(case, data)
    assert np.max(np.abs(oracle.clearing.cost_rt)) <= 1e-6
    rep = dispatch_cost_report(oracle, oracle)
    assert rep.cost_rt is None
    assert rep.cost_err_avg == 0.0 and rep.cost_err_cvar10 == 0.0
    m = regime_metrics(oracle, oracle, "train")
    assert np.all(m.farm_cr == 100.0)


def test_oracle_on_hand_case_costs_2000():
    case = load_case(bundled_case("one_bus"))
    data = Dataset(np.ones((1, 1)), np.array([[0.1]]))  # 10 MW of 100 MW capacity
    oracle = oracle_run(case, data)
    assert oracle.clearing.cost_total[0] == pytest.approx(2000.0, abs=1e-6)


def test_report_invariants(three_bus):
    case, data = three_bus
    oracle = oracle_run(case, data)
    theta = np.full((2, data.dim), 0.2)
    run = regime_run(case, data, theta, "baseline")
    rep = dispatch_cost_report(run, oracle)
    assert rep.cost_err_cvar10 >= rep.cost_err_avg >= 0.0
    assert rep.cost_total == pytest.approx(rep.cost_da + rep.cost_rt)
    assert np.allclose(cost_errors(run, oracle),
                       run.clearing.cost_total - oracle.clearing.cost_total)


def test_payment_balance_uncongested(three_bus):
    case, data = three_bus
    run = regime_run(case, data, np.full((2, data.dim), 0.25), "baseline")
    st_ = run.settlement
    # wind and generators are paid exactly what loads pay net of shedding compensation
    lhs = st_.wind_revenue.sum(axis=1) + st_.gen_revenue
    assert np.max(np.abs(lhs - st_.demand_charge)) <= 1e-6


def test_clip_bounds_forecasts(three_bus):
    case, data = three_bus
    theta = np.full((2, data.dim), 2.0)
    run = regime_run(case, data, theta, "baseline", clip=True)
    assert np.all(run.forecast <= case.wind_cap + 1e-12)


def test_sample_mismatch(three_bus):
    case, data = three_bus
    a = oracle_run(case, data.subset(np.arange(10)))
    b = oracle_run(case, data.subset(np.arange(1, 11)))
    with pytest.raises(SampleMismatch):
        cost_errors(a, b)
