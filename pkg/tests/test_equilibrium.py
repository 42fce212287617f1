import numpy as np
import pytest

from regeq.equilibrium import (GameConfig, build_central_qp, potential_value, solve_equilibrium,
                               verify_equilibrium)
from regeq.errors import InvariantViolation
from regeq.features import Dataset, KernelConfig, KernelSpec, feature_matrix
from regeq.io import bundled_case, load_case
from regeq.market import DispatchDecision
from regeq.qp import QPSettings
from regeq.synth import synth_arrays


def three_bus(n, seed=0):
    case = load_case(bundled_case("three_bus"))
    kc = KernelConfig((KernelSpec("wind_speed", (3.0, 6.0, 9.0, 12.0), 0.3),))
    _, pu, raw = synth_arrays(seed, n, 2)
    return case, Dataset(feature_matrix(raw[:, :1], kc), pu)


def zero_decision(n, nb):
    z = np.zeros((n, nb))
    return DispatchDecision(z, z, z, z)


def test_structural_count_single_sample():
    case = load_case(bundled_case("one_bus"))
    data = Dataset(np.array([[0.5]]), np.array([0.2]))
    qp = build_central_qp(case, data, GameConfig(gamma=1.0, tau=1.0))
    # theta, lifted forecast, p, r_up, r_dn, shed, one l1 auxiliary
    assert qp.n_var == 7
    # forecast definition plus the day-ahead and real-time balances
    assert qp.n_eq == 3
    # six generator-set rows, two shedding bounds, three l1 rows; no lines
    assert qp.n_ineq == 6 + 2 + 3


def test_potential_hand_values():
    case = load_case(bundled_case("one_bus"))
    cfg = GameConfig(gamma=1.0, tau=1.0)
    zero = Dataset(np.array([[0.5]]), np.array([0.0]))
    assert potential_value(np.zeros((1, 1)), zero_decision(1, 1), case, zero, cfg) == 0.0
    one_mw = Dataset(np.array([[0.5]]), np.array([1.0 / case.wind_cap[0]]))
    assert potential_value(np.zeros((1, 1)), zero_decision(1, 1), case, one_mw,
                           cfg) == pytest.approx(2.0, abs=1e-12)


def test_potential_matches_central_objective():
    case, data = three_bus(15)
    cfg = GameConfig(gamma=0.01, tau=10.0)
    sol = solve_equilibrium(case, data, cfg)
    W = data.wind_mw(case.wind_cap)
    const = float(np.mean(np.sum(cfg.gammas(2) * W ** 2, axis=1)))
    f = potential_value(sol.theta.theta, sol.dispatch, case, data, cfg)
    assert f - const == pytest.approx(sol.objective, rel=1e-8)


def test_realizable_data_recovered_without_regulation():
    case, data = three_bus(30, seed=3)
    truth = np.array([[0.1, 0.3, 0.4, 0.2], [0.0, 0.5, 0.2, 0.1]])
    exact = Dataset(data.features, data.features @ truth.T)
    sol = solve_equilibrium(case, exact, GameConfig(gamma=0.01, tau=10.0))
    assert np.max(np.abs(sol.theta.theta - truth)) <= 1e-5
    assert np.max(sol.dispatch.r_up) <= 1e-6 and np.max(sol.dispatch.r_dn) <= 1e-6


def test_large_gamma_pins_forecast_to_data():
    case, data = three_bus(20, seed=4)
    sol = solve_equilibrium(case, data, GameConfig(gamma=1e3, tau=10.0))
    weak = solve_equilibrium(case, data, GameConfig(gamma=1e-3, tau=10.0))
    W = data.wind_mw(case.wind_cap)
    assert np.abs(sol.forecast - W).mean() < np.abs(weak.forecast - W).mean()


def test_solution_invariants():
    case, data = three_bus(20, seed=5)
    cfg = GameConfig(gamma=0.01, tau=2.0)
    sol = solve_equilibrium(case, data, cfg)
    assert sol.theta.within(cfg.taus(2))
    assert sol.prices.min_dual() >= -1e-8
    assert sol.dispatch.violations(case) <= 1e-6
    assert np.max(sol.dispatch.r_up * sol.dispatch.r_dn) <= 1e-6
    assert sol.diagnostics["kkt"].max() <= 1e-6


def test_aggregate_uniqueness_across_backends():
    case, data = three_bus(12, seed=6)
    a = solve_equilibrium(case, data, GameConfig(gamma=0.01, tau=10.0))
    b = solve_equilibrium(case, data, GameConfig(gamma=0.01, tau=10.0,
                                                  settings=QPSettings(backend="cvxopt")))
    assert np.max(np.abs(a.theta.theta - b.theta.theta)) <= 1e-5
    assert np.max(np.abs(a.dispatch.output - b.dispatch.output)) <= 1e-5
    assert np.max(np.abs(a.dispatch.shed - b.dispatch.shed)) <= 1e-5


def test_zeroed_farm_cannot_lose_by_deviating():
    case, data = three_bus(20, seed=7)
    cfg = GameConfig(gamma=0.01, tau=10.0)
    sol = solve_equilibrium(case, data, cfg)
    theta = np.array(sol.theta.theta)
    theta[0] = 0.0
    moved = solve_equilibrium(case, data, cfg, fixed={0: theta[0], 1: theta[1]})
    rep = verify_equilibrium(moved, case, data, cfg, farms=[0])
    assert rep.gain[0] >= -1e-6 * max(1.0, abs(rep.current_profit[0]))


def test_trial_sweep_reported():
    case, data = three_bus(10, seed=8)
    cfg = GameConfig(gamma=0.01, tau=10.0)
    sol = solve_equilibrium(case, data, cfg)
    rep = verify_equilibrium(sol, case, data, cfg, trials=5, seed=0)
    assert np.all(np.isfinite(rep.trial_gain))


def test_game_config_rejects_nonpositive_weights():
    with pytest.raises(InvariantViolation):
        GameConfig(gamma=0.0)
    with pytest.raises(InvariantViolation):
        GameConfig(tau=-1.0)
