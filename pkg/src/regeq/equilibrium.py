"""Regression equilibrium via its centralized regularized cost minimization.

The central QP stacks, for every training sample, the day-ahead and
real-time market constraints together with the per-farm l1 balls, and
minimizes average dispatch cost plus the Gamma-weighted regression loss.
Its balance and flow duals, rescaled by ``n`` because the objective is an
average, are the equilibrium prices.

Variable layout of the central QP (sample-major within each group):

``theta`` (b*k), ``t`` (l1 auxiliaries of free farms), ``forecast`` (n*b MW,
tied to theta by equality rows), ``p``, ``r_up``, ``r_dn`` (n*n_gen each) and
``shed`` (n*n_load). The explicit forecast block keeps the flow rows sparse.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvariantViolation, NegativeDual
from .features import Dataset
from .market import (DispatchDecision, NetworkCase, PriceSystem, RegressionProfile,
                     farm_forecasts, settle_forecasts, to_bus)
from .qp import (QPSettings, QPSolution, QuadraticProgram, project_l1_ball, raise_for_status,
                 solve_qp)


@dataclass(frozen=True)
class GameConfig:
    """Regression-loss weights and l1 radii; scalars broadcast to all farms."""

    gamma: object = 1e-4
    tau: object = 10.0
    settings: QPSettings = field(default_factory=QPSettings)
    check_duals: bool = True

    def __post_init__(self):
        if np.any(np.asarray(self.gamma, dtype=float) <= 0):
            raise InvariantViolation("gamma must be strictly positive")
        if np.any(np.asarray(self.tau, dtype=float) <= 0):
            raise InvariantViolation("tau must be strictly positive")

    def gammas(self, b: int) -> np.ndarray:
        return _per_farm(self.gamma, b, "gamma")

    def taus(self, b: int) -> np.ndarray:
        return _per_farm(self.tau, b, "tau")


def _per_farm(v, b, name):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return np.full(b, float(v))
    if v.shape != (b,):
        raise DimensionMismatch(f"{name} must be a scalar or have one entry per farm")
    return v.copy()


@dataclass(eq=False)
class EquilibriumSolution:
    theta: RegressionProfile
    forecast: np.ndarray  # (n, b) MW
    dispatch: DispatchDecision  # (n, n_bus) arrays
    prices: PriceSystem
    objective: float
    diagnostics: dict = field(default_factory=dict)
    qp: QuadraticProgram = field(default=None, repr=False)
    solution: QPSolution = field(default=None, repr=False)

    def farm_profits(self, case: NetworkCase, dataset: Dataset, cfg: GameConfig) -> np.ndarray:
        return wind_profits(case, dataset, cfg, self.forecast, self.prices)


def wind_profits(case, dataset, cfg, forecast, prices) -> np.ndarray:
    """Average per-farm profit: revenue at both prices minus regression loss."""
    wind = dataset.wind_mw(case.wind_cap)
    zero = np.zeros_like(prices.lmp_da)
    dummy = DispatchDecision(zero, zero, zero, zero)
    st = settle_forecasts(case, prices.lmp_da, prices.lmp_rt, forecast, wind, dummy,
                          cfg.gammas(case.n_farm))
    return st.wind_profit.mean(axis=0)


# --------------------------------------------------------------------------
# central QP


class _Layout:
    def __init__(self, case, dataset, free):
        self.b, self.k, self.n = case.n_farm, dataset.dim, dataset.n
        self.ng, self.nl, self.m = case.gen_buses.size, case.load_buses.size, case.n_line
        self.free = list(free)
        sizes = [("theta", self.b * self.k), ("t", len(self.free) * self.k),
                 ("forecast", self.n * self.b), ("p", self.n * self.ng),
                 ("r_up", self.n * self.ng), ("r_dn", self.n * self.ng),
                 ("shed", self.n * self.nl)]
        self.sizes = dict(sizes)
        self.order = [s for s, _ in sizes]
        self.index, start = {}, 0
        for name, size in sizes:
            self.index[name] = np.arange(start, start + size)
            start += size
        self.n_var = start

    def row(self, nrows, **blocks):
        """Horizontally assemble one constraint group from named column blocks."""
        parts = []
        for name in self.order:
            M = blocks.get(name)
            parts.append(sp.csr_matrix((nrows, self.sizes[name])) if M is None
                         else sp.csr_matrix(M))
        return sp.hstack(parts, format="csr")


def _check_inputs(case, dataset):
    if dataset.n_farm != case.n_farm:
        raise DimensionMismatch(f"dataset has {dataset.n_farm} farms, case has {case.n_farm}")
    if dataset.n < 1:
        raise DimensionMismatch("dataset is empty")


def build_central_qp(case: NetworkCase, dataset: Dataset, cfg: GameConfig,
                     fixed: dict | None = None) -> QuadraticProgram:
    """Assemble the centralized equilibrium QP.

    ``fixed`` maps farm index to a parameter vector held constant; fixed
    farms get no l1 block. Constraint groups are labelled in ``qp.rows``.
    """
    _check_inputs(case, dataset)
    fixed = dict(fixed or {})
    b, k, n = case.n_farm, dataset.dim, dataset.n
    free = [j for j in range(b) if j not in fixed]
    L = _Layout(case, dataset, free)
    g, ld = case.gen_buses, case.load_buses
    ng, nl, m = L.ng, L.nl, L.m
    gamma, tau = cfg.gammas(b), cfg.taus(b)
    cap = case.wind_cap
    F = case.ptdf
    Phi = dataset.features
    W = dataset.wind_mw(cap)
    In = sp.identity(n, format="csr")

    def kr(M):
        return sp.kron(In, sp.csr_matrix(M), format="csr")

    # objective
    Cg, Sl = case.gen_cost_quad[g], case.shed_cost_quad[ld]
    Cb = kr(sp.diags(Cg))
    gen_P = (2.0 / n) * sp.bmat([[Cb, Cb, -Cb], [Cb, Cb, -Cb], [-Cb, -Cb, Cb]])
    P = sp.block_diag([
        sp.csr_matrix((L.sizes["theta"] + L.sizes["t"],) * 2),
        sp.diags(np.tile(2.0 * gamma / n, n)),
        gen_P,
        kr(sp.diags(2.0 * Sl / n)),
    ], format="csc")
    q = np.zeros(L.n_var)
    q[L.index["forecast"]] = (-2.0 / n * gamma * W).ravel()
    q[L.index["p"]] = np.tile(case.gen_cost_lin[g], n) / n
    q[L.index["r_up"]] = np.tile(case.reg_up_cost[g], n) / n
    q[L.index["r_dn"]] = -np.tile(case.reg_dn_cost[g], n) / n
    q[L.index["shed"]] = np.tile(case.shed_cost_lin[ld], n) / n
    constant = float(np.sum(gamma * W ** 2) / n)

    ones_g, ones_l, ones_b = np.ones((1, ng)), np.ones((1, nl)), np.ones((1, b))
    eqs, eq_rhs, eq_names = [], [], []
    ineqs, in_rhs, in_names = [], [], []

    def add(store, rhs, names, name, M, r):
        store.append(M)
        rhs.append(np.asarray(r, dtype=float).ravel())
        names.append((name, M.shape[0]))

    # balances
    add(eqs, eq_rhs, eq_names, "da_balance",
        L.row(n, p=kr(ones_g), forecast=kr(ones_b)), np.full(n, case.demand.sum()))
    add(eqs, eq_rhs, eq_names, "rt_balance",
        L.row(n, r_up=kr(ones_g), r_dn=-kr(ones_g), shed=kr(ones_l), forecast=-kr(ones_b)),
        -W.sum(axis=1))
    # forecast_ij = cap_j * phi_i' theta_j
    ii, jj, ff = np.meshgrid(np.arange(n), np.arange(b), np.arange(k), indexing="ij")
    lift = sp.csr_matrix(((cap[jj] * Phi[ii, ff]).ravel(), ((ii * b + jj).ravel(),
                                                           (jj * k + ff).ravel())),
                         shape=(n * b, b * k))
    add(eqs, eq_rhs, eq_names, "forecast_def",
        L.row(n * b, forecast=sp.identity(n * b), theta=-lift), np.zeros(n * b))
    if fixed:
        cols = np.concatenate([np.arange(j * k, (j + 1) * k) for j in sorted(fixed)])
        sel = sp.csr_matrix((np.ones(cols.size), (np.arange(cols.size), cols)),
                            shape=(cols.size, b * k))
        vals = np.concatenate([np.asarray(fixed[j], dtype=float).ravel() for j in sorted(fixed)])
        if vals.size != cols.size:
            raise DimensionMismatch("fixed parameter vectors must have the feature dimension")
        add(eqs, eq_rhs, eq_names, "theta_fixed", L.row(cols.size, theta=sel), vals)

    # flows
    Fg, Fl, Fw = F[:, g], F[:, ld], F[:, case.wind_bus]
    Fd = F @ case.demand
    da = L.row(n * m, p=kr(Fg), forecast=kr(Fw))
    add(ineqs, in_rhs, in_names, "da_flow_up", da, np.tile(case.line_limit + Fd, n))
    add(ineqs, in_rhs, in_names, "da_flow_dn", -da, np.tile(case.line_limit - Fd, n))
    flow_w = (to_bus(case, W) - case.demand) @ F.T  # (n, m)
    rt = L.row(n * m, p=kr(Fg), r_up=kr(Fg), r_dn=-kr(Fg), shed=kr(Fl))
    add(ineqs, in_rhs, in_names, "rt_flow_up", rt, np.tile(case.line_limit, n) - flow_w.ravel())
    add(ineqs, in_rhs, in_names, "rt_flow_dn", -rt, np.tile(case.line_limit, n) + flow_w.ravel())

    # generator and load sets
    Ig, Il = sp.identity(n * ng), sp.identity(n * nl)
    pmax, pmin = np.tile(case.p_max[g], n), np.tile(case.p_min[g], n)
    add(ineqs, in_rhs, in_names, "gen_max", L.row(n * ng, p=Ig, r_up=Ig, r_dn=-Ig), pmax)
    add(ineqs, in_rhs, in_names, "gen_min", L.row(n * ng, p=-Ig, r_up=-Ig, r_dn=Ig), -pmin)
    add(ineqs, in_rhs, in_names, "r_up_max", L.row(n * ng, p=Ig, r_up=Ig), pmax)
    add(ineqs, in_rhs, in_names, "r_up_min", L.row(n * ng, r_up=-Ig), np.zeros(n * ng))
    add(ineqs, in_rhs, in_names, "r_dn_max", L.row(n * ng, p=-Ig, r_dn=Ig), -pmin)
    add(ineqs, in_rhs, in_names, "r_dn_min", L.row(n * ng, r_dn=-Ig), np.zeros(n * ng))
    add(ineqs, in_rhs, in_names, "shed_max", L.row(n * nl, shed=Il), np.tile(case.demand[ld], n))
    add(ineqs, in_rhs, in_names, "shed_min", L.row(n * nl, shed=-Il), np.zeros(n * nl))

    # l1 balls of free farms
    if free:
        nf = len(free)
        cols = np.concatenate([np.arange(j * k, (j + 1) * k) for j in free])
        sel = sp.csr_matrix((np.ones(nf * k), (np.arange(nf * k), cols)), shape=(nf * k, b * k))
        It = sp.identity(nf * k)
        add(ineqs, in_rhs, in_names, "l1_pos", L.row(nf * k, theta=sel, t=-It), np.zeros(nf * k))
        add(ineqs, in_rhs, in_names, "l1_neg", L.row(nf * k, theta=-sel, t=-It), np.zeros(nf * k))
        add(ineqs, in_rhs, in_names, "l1_sum",
            L.row(nf, t=sp.kron(sp.identity(nf), np.ones((1, k)))), tau[free])

    rows, off = {}, 0
    for name, cnt in eq_names:
        rows[name] = ("eq", np.arange(off, off + cnt))
        off += cnt
    off = 0
    for name, cnt in in_names:
        rows[name] = ("ineq", np.arange(off, off + cnt))
        off += cnt
    A = sp.vstack(eqs, format="csc")
    G = sp.vstack(ineqs, format="csc")
    return QuadraticProgram(P, q, A, np.concatenate(eq_rhs), G, np.concatenate(in_rhs),
                            constant=constant, index=dict(L.index), rows=rows)


def _extract(case, dataset, cfg, qp, sol, elapsed):
    n, b, k, m = dataset.n, case.n_farm, dataset.dim, case.n_line
    g, ld = case.gen_buses, case.load_buses
    x = sol.x
    theta = x[qp.index["theta"]].reshape(b, k)
    forecast = x[qp.index["forecast"]].reshape(n, b)

    def bus(name, cols):
        out = np.zeros((n, case.n_bus))
        out[:, cols] = x[qp.index[name]].reshape(n, cols.size)
        return out

    decision = DispatchDecision(bus("p", g), bus("r_up", g), bus("r_dn", g),
                                bus("shed", ld)).netted()

    def dual(name, shape):
        kind, idx = qp.rows[name]
        v = sol.y_eq[idx] if kind == "eq" else sol.y_ineq[idx]
        return (n * v).reshape(shape)

    mu1, mu2 = -dual("da_balance", (n,)), -dual("rt_balance", (n,))
    prices = PriceSystem.from_duals(mu1, mu2, dual("da_flow_up", (n, m)), dual("da_flow_dn", (n, m)),
                                    dual("rt_flow_up", (n, m)), dual("rt_flow_dn", (n, m)),
                                    case.ptdf)
    min_dual = prices.min_dual()
    scale = max(1.0, float(np.max(np.abs(prices.lmp_da))), float(np.max(np.abs(prices.lmp_rt))))
    if cfg.check_duals and min_dual < -1e-8 * scale:
        raise NegativeDual(f"extracted price dual {min_dual:.3e} is negative")
    diagnostics = {"kkt": sol.kkt, "solve_time": sol.solve_time, "wall_time": elapsed,
                   "status": sol.status.value, "backend": sol.backend, "min_dual": min_dual,
                   "n_var": qp.n_var, "n_eq": qp.n_eq, "n_ineq": qp.n_ineq}
    return EquilibriumSolution(RegressionProfile(theta), forecast, decision, prices,
                               sol.objective, diagnostics, qp, sol)


def solve_equilibrium(case: NetworkCase, dataset: Dataset, cfg: GameConfig,
                      fixed: dict | None = None) -> EquilibriumSolution:
    """Solve the centralized problem and recover per-sample prices.

    With ``fixed`` the listed farms keep their parameters while the other
    farms, generators and loads re-equilibrate.
    """
    t0 = time.perf_counter()
    qp = build_central_qp(case, dataset, cfg, fixed)
    sol = solve_qp(qp, cfg.settings)
    if not sol.optimal:
        raise_for_status(sol.status, "central equilibrium problem", list(dataset.ids))
    return _extract(case, dataset, cfg, qp, sol, time.perf_counter() - t0)


def solve_fixed_profile(case: NetworkCase, dataset: Dataset, cfg: GameConfig,
                        theta) -> EquilibriumSolution:
    """Dispatch and prices supporting a given regression profile."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    return solve_equilibrium(case, dataset, cfg, fixed={j: theta[j] for j in range(case.n_farm)})


# --------------------------------------------------------------------------
# potential, gradient map, Jacobian


def pack_point(theta, decision: DispatchDecision) -> np.ndarray:
    """Stack ``[vec(theta), p, r_up, r_dn, shed]`` with bus-indexed dispatch."""
    return np.concatenate([np.ravel(theta), np.ravel(decision.p), np.ravel(decision.r_up),
                           np.ravel(decision.r_dn), np.ravel(decision.shed)])


def unpack_point(vec, case: NetworkCase, n: int, k: int):
    vec = np.asarray(vec, dtype=float)
    bk, nb = case.n_farm * k, n * case.n_bus
    if vec.size != bk + 4 * nb:
        raise DimensionMismatch("point vector has the wrong length")
    theta = vec[:bk].reshape(case.n_farm, k)
    parts = [vec[bk + i * nb: bk + (i + 1) * nb].reshape(n, case.n_bus) for i in range(4)]
    return theta, DispatchDecision(*parts)


def potential_value(theta, decision: DispatchDecision, case: NetworkCase, dataset: Dataset,
                    cfg: GameConfig) -> float:
    """Potential whose gradient is the game mapping.

    Average over samples of the Gamma-weighted squared forecast error, the
    constant ``w'Gamma w``, the generation and regulation cost and the
    shedding cost.
    """
    _check_inputs(case, dataset)
    gamma = cfg.gammas(case.n_farm)
    W = dataset.wind_mw(case.wind_cap)
    fc = farm_forecasts(case, theta, dataset.features)
    d = decision
    q = d.p + d.r_up - d.r_dn
    terms = (np.sum(gamma * (fc - W) ** 2, axis=1) + np.sum(gamma * W ** 2, axis=1)
             + np.sum(case.gen_cost_quad * q ** 2, axis=1) + d.p @ case.gen_cost_lin
             + d.r_up @ case.reg_up_cost - d.r_dn @ case.reg_dn_cost
             + np.sum(case.shed_cost_quad * d.shed ** 2, axis=1) + d.shed @ case.shed_cost_lin)
    return float(terms.mean())


def gradient_map(theta, decision: DispatchDecision, case: NetworkCase, dataset: Dataset,
                 cfg: GameConfig) -> np.ndarray:
    """Stacked partial derivatives of the private objectives without prices.

    Signs are those of the minimized potential, i.e. negated profit
    gradients. Layout follows :func:`pack_point`.
    """
    _check_inputs(case, dataset)
    n = dataset.n
    gamma, cap = cfg.gammas(case.n_farm), case.wind_cap
    Phi = dataset.features
    W = dataset.wind_mw(cap)
    err = farm_forecasts(case, theta, Phi) - W  # (n, b)
    g_theta = (2.0 / n) * (gamma * cap)[:, None] * (err.T @ Phi)
    d = decision
    q2 = 2.0 * case.gen_cost_quad * (d.p + d.r_up - d.r_dn)
    g_p = (case.gen_cost_lin + q2) / n
    g_up = (case.reg_up_cost + q2) / n
    g_dn = (-case.reg_dn_cost - q2) / n
    g_l = (case.shed_cost_lin + 2.0 * case.shed_cost_quad * d.shed) / n
    return np.concatenate([g_theta.ravel(), g_p.ravel(), g_up.ravel(), g_dn.ravel(), g_l.ravel()])


def jacobian_map(case: NetworkCase, dataset: Dataset, cfg: GameConfig) -> sp.csr_matrix:
    """Constant Jacobian of :func:`gradient_map` (the mapping is affine)."""
    _check_inputs(case, dataset)
    n = dataset.n
    gamma, cap = cfg.gammas(case.n_farm), case.wind_cap
    Phi = dataset.features
    gram = Phi.T @ Phi
    wind = sp.block_diag([(2.0 / n) * gamma[j] * cap[j] ** 2 * gram for j in range(case.n_farm)])
    C = sp.kron(sp.identity(n), sp.diags(case.gen_cost_quad))
    sign = np.array([[1.0, 1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    gen = (2.0 / n) * sp.kron(sp.csr_matrix(sign), C)
    load = (2.0 / n) * sp.kron(sp.identity(n), sp.diags(case.shed_cost_quad))
    return sp.block_diag([wind, gen, load], format="csr")


# --------------------------------------------------------------------------
# deviation check


@dataclass(eq=False)
class DeviationReport:
    """Per-farm unilateral-deviation results, all in $ averaged over samples.

    For farm ``j`` the problem is re-solved with every other farm fixed.
    ``gain`` is the profit of the re-solved model minus the profit of the
    current model, both settled at the re-solved prices. Real-time
    congestion duals are not unique when a generator sits at the kink
    between up and down regulation, so profits settled under two different
    dual selections are not comparable; ``raw_gain`` keeps that literal
    difference (re-solved profit minus current profit at the current
    prices) for reference. ``trial_gain`` is the best price-taking gain
    over random feasible perturbations at the current prices.
    """

    current_profit: np.ndarray
    deviation_profit: np.ndarray
    gain: np.ndarray
    raw_gain: np.ndarray
    trial_gain: np.ndarray
    deviation_theta: np.ndarray
    farms: list


def _farm_profit(case, dataset, cfg, j, theta_j, lmp_da, lmp_rt):
    f = case.wind_cap[j] * (dataset.features @ theta_j)
    w = dataset.wind_mw(case.wind_cap)[:, j]
    bus = case.wind_bus[j]
    gamma = cfg.gammas(case.n_farm)[j]
    return float(np.mean(lmp_da[:, bus] * f + lmp_rt[:, bus] * (w - f) - gamma * (f - w) ** 2))


def verify_equilibrium(sol: EquilibriumSolution, case: NetworkCase, dataset: Dataset,
                       cfg: GameConfig, trials: int = 0, seed: int = 0,
                       farms=None) -> DeviationReport:
    """Measure each farm's incentive to deviate unilaterally from ``sol``."""
    b = case.n_farm
    farms = list(range(b)) if farms is None else list(farms)
    theta = sol.theta.theta
    current = sol.farm_profits(case, dataset, cfg)
    dev_profit = np.full(b, np.nan)
    gain = np.full(b, np.nan)
    dev_theta = np.array(theta, copy=True)
    for j in farms:
        others = {i: theta[i] for i in range(b) if i != j}
        s2 = solve_equilibrium(case, dataset, cfg, fixed=others)
        dev_theta[j] = s2.theta.theta[j]
        dev_profit[j] = s2.farm_profits(case, dataset, cfg)[j]
        stay = _farm_profit(case, dataset, cfg, j, theta[j], s2.prices.lmp_da, s2.prices.lmp_rt)
        gain[j] = dev_profit[j] - stay
    trial_gain = np.full(b, np.nan)
    if trials > 0:
        rng = np.random.default_rng(seed)
        tau = cfg.taus(b)
        for j in farms:
            spread = 0.1 * max(1.0, float(np.max(np.abs(theta[j]))))
            best = -np.inf
            for _ in range(trials):
                cand = project_l1_ball(theta[j] + spread * rng.standard_normal(theta.shape[1]),
                                       tau[j])
                prof = _farm_profit(case, dataset, cfg, j, cand, sol.prices.lmp_da,
                                    sol.prices.lmp_rt)
                best = max(best, prof - current[j])
            trial_gain[j] = best
    return DeviationReport(current, dev_profit, gain, dev_profit - current, trial_gain,
                           dev_theta, farms)
