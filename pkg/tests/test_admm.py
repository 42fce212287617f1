import numpy as np
import pytest

import regeq.admm as admm
from regeq.admm import (Duals, FarmData, FarmSignal, Iterate, StepSchedule, StopRule,
                        admm_solve, best_response_generators, best_response_loads,
                        best_response_wind, dual_update, farm_signal, lmp_update)
from regeq.equilibrium import GameConfig, solve_equilibrium
from regeq.errors import InvariantViolation
from regeq.features import Dataset, KernelConfig, KernelSpec, feature_matrix, fit_price_taker
from regeq.io import bundled_case, load_case
from regeq.market import DispatchDecision, equilibrium_lmps
from regeq.qp import record_solves
from regeq.synth import synth_arrays


@pytest.fixture(scope="module")
def one_bus():
    return load_case(bundled_case("one_bus"))


def three_bus(n, seed=0):
    case = load_case(bundled_case("three_bus"))
    kc = KernelConfig((KernelSpec("wind_speed", (3.0, 6.0, 9.0, 12.0), 0.3),))
    _, pu, raw = synth_arrays(seed, n, 2)
    return case, Dataset(feature_matrix(raw[:, :1], kc), pu)


def iterate(case, n, p=0.0, forecast=0.0, shed=0.0):
    nb = case.n_bus
    z = np.zeros((n, nb))
    return Iterate(np.zeros((case.n_farm, 1)), np.full((n, case.n_farm), forecast),
                   DispatchDecision(np.full((n, nb), p), z, z, np.full((n, nb), shed)))


# schedules


def test_schedule_values():
    s = StepSchedule.geometric(8.0, 0.5, every=100, floor=1.0)
    assert [s(k) for k in (0, 99, 100, 250, 5000)] == [8.0, 8.0, 4.0, 2.0, 1.0]
    assert StepSchedule.constant(3.0)(10 ** 6) == 3.0
    assert StepSchedule.from_dict(s.to_dict()) == s
    with pytest.raises(InvariantViolation):
        StepSchedule((0, 0), (1.0, 2.0))
    with pytest.raises(InvariantViolation):
        StepSchedule((1,), (1.0,))


# dual and price updates


def test_dual_update_examples(one_bus):
    data = Dataset(np.ones((1, 1)), np.array([[0.1]]))  # 10 MW realized
    # balance p + f - d = 42 + 10 - 50 = 2; real time balanced
    it = iterate(one_bus, 1, p=42.0, forecast=10.0)
    out = dual_update(Duals(np.array([5.0]), np.array([7.0]), *(np.zeros((1, 0)),) * 4),
                      one_bus, data, it, rho=1.0)
    assert out.mu1[0] == 3.0 and out.mu2[0] == 7.0
    it = iterate(one_bus, 1, p=45.0, forecast=10.0)  # surplus 5
    out = dual_update(Duals(np.array([1.0]), np.array([0.0]), *(np.zeros((1, 0)),) * 4),
                      one_bus, data, it, rho=1.0)
    assert out.mu1[0] == 0.0


def test_dual_update_fixed_point_without_violation():
    case, data = three_bus(4)
    sol = solve_equilibrium(case, data, GameConfig(gamma=0.01))
    pr = sol.prices
    duals = Duals(pr.mu1, pr.mu2, pr.kbar1, pr.kun1, pr.kbar2, pr.kun2)
    it = Iterate(sol.theta.theta, sol.forecast, sol.dispatch)
    out = dual_update(duals, case, data, it, rho=1.0)
    assert abs(out.mu1 - pr.mu1).max() <= 1e-6 and abs(out.mu2 - pr.mu2).max() <= 1e-6


def test_lmp_update_matches_composition():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(3, 4))
    d = Duals(rng.uniform(size=5), rng.uniform(size=5), *(rng.uniform(size=(5, 3)) for _ in range(4)))
    a = lmp_update(d, F)
    b = equilibrium_lmps(d.mu1, d.mu2, d.kbar1, d.kun1, d.kbar2, d.kun2, F)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# best responses


def test_generator_price_taking_response(one_bus):
    data = Dataset(np.ones((2, 1)), np.zeros((2, 1)))
    # equal prices in both markets leave nothing to gain from regulation
    lmp = np.array([[90.0], [5.0]])  # second price sits below marginal cost at p_min
    p, up, dn = best_response_generators(one_bus, data, lmp, lmp, iterate(one_bus, 2),
                                         rho=0.0)
    assert p[0, 0] == pytest.approx(40.0, abs=1e-6)
    assert p[1, 0] == pytest.approx(0.0, abs=1e-6)
    assert max(up.max(), dn.max()) <= 1e-6


def test_generator_buys_back_cheap_real_time_energy(one_bus):
    data = Dataset(np.ones((1, 1)), np.zeros((1, 1)))
    p, up, dn = best_response_generators(one_bus, data, np.array([[90.0]]),
                                         np.zeros((1, 1)), iterate(one_bus, 1), rho=0.0)
    # sell the full rating day-ahead and buy all of it back at the zero real-time price
    q = p[0, 0] + up[0, 0] - dn[0, 0]
    assert p[0, 0] == pytest.approx(100.0, abs=1e-6)
    assert q == pytest.approx(0.0, abs=1e-6)


def test_load_shedding_response(one_bus):
    data = Dataset(np.ones((2, 1)), np.zeros((2, 1)))
    s, S = one_bus.shed_cost_lin[0], one_bus.shed_cost_quad[0]
    lmp_rt = np.array([[s - 1.0], [s + 2 * S * 5.0]])
    shed = best_response_loads(one_bus, data, lmp_rt, iterate(one_bus, 2), rho=0.0)
    assert shed[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert shed[1, 0] == pytest.approx(5.0, abs=1e-5)


def _signal(case, data, prices_da, prices_rt, it, j=0):
    return farm_signal(case, data, j, prices_da, prices_rt, it)


def test_wind_response_without_penalty_is_price_taking():
    case, data = three_bus(30, seed=1)
    rng = np.random.default_rng(2)
    l1, l2 = rng.uniform(10, 30, (30, 3)), rng.uniform(0, 60, (30, 3))
    W = data.wind_mw(case.wind_cap)
    fd = FarmData(data.features, W[:, 0], float(case.wind_cap[0]), 0.01, 10.0)
    it = Iterate(np.zeros((2, data.dim)), np.zeros((30, 2)), iterate(case, 30).decision)
    theta, _ = best_response_wind(fd, _signal(case, data, l1, l2, it), rho=0.0)
    bus = case.wind_bus[0]
    ref = fit_price_taker(data.farm(0), l1[:, bus], l2[:, bus], 0.01, 10.0,
                          scale=float(case.wind_cap[0]))
    assert np.max(np.abs(theta - ref.theta)) <= 1e-5


def test_wind_response_large_penalty_closes_balance(one_bus):
    n = 5
    phi = np.ones((n, 1))
    data = Dataset(phi, np.full((n, 1), 0.1))  # 10 MW realized
    it = iterate(one_bus, n, p=40.0)  # generators leave 10 of the 50 MW demand open
    fd = FarmData(phi, np.full(n, 10.0), 100.0, 1e-4, 10.0)
    lmp = np.full((n, 1), 30.0)
    _, forecast = best_response_wind(fd, _signal(one_bus, data, lmp, 0.5 * lmp, it), rho=1e6)
    # both balances close at a 10 MW forecast despite the price incentive to over-forecast
    assert np.max(np.abs(forecast - 10.0)) <= 1e-3


def test_wind_response_kkt_at_published_rho():
    case, data = three_bus(20, seed=2)
    W = data.wind_mw(case.wind_cap)
    fd = FarmData(data.features, W[:, 1], float(case.wind_cap[1]), 0.01, 10.0)
    it = iterate(case, 20, p=50.0)
    lmp = np.full((20, 3), 20.0)
    with record_solves() as log:
        best_response_wind(fd, _signal(case, data, lmp, lmp, it, j=1), rho=100.0)
    assert log and all(k <= 1e-6 for _, k, _ in log)


def test_privacy_contract(monkeypatch):
    """Each farm's best response sees only its own data and public signals."""
    case, data = three_bus(10, seed=3)
    W = data.wind_mw(case.wind_cap)
    calls = []
    real = admm.best_response_wind

    def stub(farm_data, signal, rho, prox, settings):
        assert isinstance(farm_data, FarmData) and isinstance(signal, FarmSignal)
        calls.append(farm_data)
        # the signal is a handful of per-sample aggregates, never per-farm data
        for name in ("lmp_da", "lmp_rt", "da_gap", "rt_gap", "previous"):
            assert getattr(signal, name).shape == (data.n,)
        return real(farm_data, signal, rho, prox, settings)

    monkeypatch.setattr(admm, "best_response_wind", stub)
    admm_solve(case, data, GameConfig(gamma=0.01), StepSchedule.constant(1.0),
               StopRule(max_iter=2), raise_on_max_iter=False)
    assert len(calls) == 4
    for i, fd in enumerate(calls):
        j = i % 2
        assert np.array_equal(fd.wind, W[:, j])
        assert fd.cap == case.wind_cap[j]


# driver


def test_duals_stay_nonnegative(monkeypatch):
    case, data = three_bus(10, seed=4)
    seen = []
    real = admm.dual_update

    def spy(*args):
        out = real(*args)
        seen.append(out.min())
        return out

    monkeypatch.setattr(admm, "dual_update", spy)
    admm_solve(case, data, GameConfig(gamma=0.01), StepSchedule.constant(5.0),
               StopRule(max_iter=15), prox=3.0, raise_on_max_iter=False)
    assert len(seen) == 15 and min(seen) >= 0.0


def test_zero_step_freezes_prices():
    case, data = three_bus(8, seed=5)
    res = admm_solve(case, data, GameConfig(gamma=0.01), StepSchedule.constant(0.0),
                     StopRule(tol=1e-3, window=3, max_iter=3))
    assert all(row["max_lmp_change"] == 0.0 for row in res.trace)


def test_start_at_equilibrium_is_fixed_point():
    case, data = three_bus(10, seed=6)
    cfg = GameConfig(gamma=0.01)
    sol = solve_equilibrium(case, data, cfg)
    res = admm_solve(case, data, cfg, StepSchedule.constant(1.0),
                     StopRule(tol=1e-3, window=1, max_iter=2), prox=3.0, initial=sol)
    assert res.converged and res.iterations <= 2
    assert np.max(np.abs(res.solution.theta.theta - sol.theta.theta)) <= 1e-4


def test_trace_csv_columns():
    case, data = three_bus(6, seed=7)
    res = admm_solve(case, data, GameConfig(gamma=0.01), StepSchedule.constant(1.0),
                     StopRule(max_iter=2), prox=3.0, raise_on_max_iter=False)
    header = res.trace_csv().splitlines()[0].split(",")
    assert header == ["iteration", "rho", "max_lmp_change", "max_balance_violation",
                      "max_flow_violation", "objective", "profit_1", "profit_2"]


def test_max_iter_raises_with_result():
    case, data = three_bus(6, seed=8)
    with pytest.raises(admm.MaxIterReached) as err:
        admm_solve(case, data, GameConfig(gamma=0.01), StepSchedule.constant(1.0),
                   StopRule(tol=1e-12, max_iter=2))
    assert err.value.result.iterations == 2


# penalty sign


def _argmax_quad(a, b, lo, hi):
    """Maximize ``a x^2 + b x`` over ``[lo, hi]`` by inspecting candidates."""
    cands = [lo, hi]
    if a < 0:
        cands.append(min(hi, max(lo, -b / (2 * a))))
    return max(cands, key=lambda x: a * x * x + b * x)


def _scalar_admm(sign, rho, iters=300):
    """One bus, one farm, one generator; day-ahead balance only.

    Farm: lam*f - (f - 10)^2. Generator: lam*p - p^2 - 10*p. Demand 50.
    Penalties enter the maximized profits as ``sign * rho/2 * residual^2``
    and both blocks carry the proximal term ``3*rho/2 * |x - x_prev|^2``.
    """
    lam = p = f = 0.0
    prox = 3.0 * rho
    resid = []
    for _ in range(iters):
        f_new = _argmax_quad(-1.0 + sign * rho / 2 - prox / 2,
                             lam + 20.0 + sign * rho * (p - 50.0) + prox * f, -100.0, 100.0)
        p_new = _argmax_quad(-1.0 + sign * rho / 2 - prox / 2,
                             lam - 10.0 + sign * rho * (f - 50.0) + prox * p, 0.0, 100.0)
        p, f = p_new, f_new
        lam = max(0.0, lam - rho * (p + f - 50.0))
        resid.append(abs(p + f - 50.0))
    return lam, resid


@pytest.mark.parametrize("rho", [1.0, 4.0, 10.0])
def test_subtracted_penalty_converges_added_penalty_does_not(rho):
    # equilibrium by hand: f = 10 + lam/2, p = (lam - 10)/2, p + f = 50  =>  lam = 45
    lam, resid = _scalar_admm(-1.0, rho)
    assert lam == pytest.approx(45.0, abs=1e-6) and max(resid[-50:]) <= 1e-6
    lam_plus, resid_plus = _scalar_admm(+1.0, rho)
    assert max(resid_plus[-50:]) >= 1.0
