"""Decentralized equilibrium computation by price-based ADMM.

Each iteration solves price-taking best responses of the wind farms, the
generators and the loads, each augmented with quadratic penalties on the
shared market constraints evaluated at the other participants' previous
iterates (Jacobi). The operator then takes a projected dual step on the
balance and flow multipliers and recomposes the LMPs.

Penalties are subtracted from the maximized profits so that constraint
violation is discouraged. Inequality penalties ``max(g, 0)**2`` are
written with slack variables ``s >= 0, s >= g`` so every subproblem stays
a QP. An optional proximal weight adds ``prox/2 * |x - x_prev|**2`` to each
block, which damps the simultaneous Jacobi moves.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvariantViolation, MaxIterReached
from .equilibrium import EquilibriumSolution, GameConfig, potential_value, wind_profits
from .features import Dataset
from .market import (DispatchDecision, NetworkCase, PriceSystem, RegressionProfile,
                     equilibrium_lmps, to_bus)
from .qp import QPSettings, QuadraticProgram, encode_l1_ball, raise_for_status, solve_qp


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant penalty/step size: ``values[i]`` from ``breakpoints[i]`` on.

    ``breakpoints`` start at 0 and are strictly increasing. An optional
    geometric tail multiplies the value by ``factor`` every ``every``
    iterations after the last breakpoint, never dropping below ``floor``.
    """

    breakpoints: tuple
    values: tuple
    factor: float = 1.0
    every: int = 1
    floor: float = 0.0

    def __post_init__(self):
        bp = tuple(int(b) for b in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if len(bp) != len(vals) or not bp or bp[0] != 0:
            raise InvariantViolation("schedule needs matching breakpoints starting at 0")
        if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise InvariantViolation("breakpoints must be strictly increasing")
        if any(v < 0 for v in vals) or self.factor <= 0 or self.every < 1 or self.floor < 0:
            raise InvariantViolation("step sizes must be nonnegative")

    @classmethod
    def constant(cls, rho: float) -> "StepSchedule":
        return cls((0,), (rho,))

    @classmethod
    def published(cls) -> "StepSchedule":
        """100 up to iteration 199, then 10, 5 from 230 and 1 from 275."""
        return cls((0, 200, 230, 275), (100.0, 10.0, 5.0, 1.0))

    @classmethod
    def geometric(cls, start: float, factor: float, every: int = 1,
                  floor: float = 0.0) -> "StepSchedule":
        return cls((0,), (start,), factor=factor, every=every, floor=floor)

    def __call__(self, k: int) -> float:
        i = int(np.searchsorted(self.breakpoints, k, side="right")) - 1
        v = self.values[i]
        if self.factor != 1.0 and i == len(self.breakpoints) - 1:
            steps = (k - self.breakpoints[-1]) // self.every
            v = max(self.floor, v * self.factor ** steps)
        return v

    def to_dict(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "values": list(self.values),
                "factor": self.factor, "every": self.every, "floor": self.floor}

    @classmethod
    def from_dict(cls, data: dict) -> "StepSchedule":
        return cls(tuple(data["breakpoints"]), tuple(data["values"]), data.get("factor", 1.0),
                   data.get("every", 1), data.get("floor", 0.0))


@dataclass(frozen=True)
class StopRule:
    tol: float = 1e-3
    window: int = 5
    max_iter: int = 1000


@dataclass
class Duals:
    mu1: np.ndarray
    mu2: np.ndarray
    kbar1: np.ndarray
    kun1: np.ndarray
    kbar2: np.ndarray
    kun2: np.ndarray

    @classmethod
    def zeros(cls, n: int, m: int) -> "Duals":
        return cls(np.zeros(n), np.zeros(n), *(np.zeros((n, m)) for _ in range(4)))

    def copy(self) -> "Duals":
        return Duals(*(np.array(v, copy=True) for v in vars(self).values()))

    def min(self) -> float:
        return float(min(np.min(v) if v.size else 0.0 for v in vars(self).values()))


@dataclass
class Iterate:
    theta: np.ndarray  # (b, k)
    forecast: np.ndarray  # (n, b) MW
    decision: DispatchDecision  # bus-indexed (n, n_bus)


@dataclass
class AdmmState:
    k: int
    duals: Duals
    lmp_da: np.ndarray
    lmp_rt: np.ndarray
    prev: Iterate
    trace: list = field(default_factory=list)


# --------------------------------------------------------------------------
# residuals of the shared constraints


def _residuals(case, W, it: Iterate):
    """Balance residuals (n,) and line flows (n, m) of an iterate."""
    d = it.decision
    fb = to_bus(case, it.forecast)
    net_da = d.p + fb - case.demand
    rt = d.r_up - d.r_dn - fb + to_bus(case, W) + d.shed
    return (net_da.sum(axis=1), rt.sum(axis=1), net_da @ case.ptdf.T,
            (net_da + rt) @ case.ptdf.T)


def dual_update(duals: Duals, case: NetworkCase, dataset: Dataset, it: Iterate,
                rho: float) -> Duals:
    """Projected dual step on the balance and flow multipliers."""
    W = dataset.wind_mw(case.wind_cap)
    bal1, bal2, flow1, flow2 = _residuals(case, W, it)
    f = case.line_limit
    pos = lambda v: np.maximum(v, 0.0)
    return Duals(pos(duals.mu1 - rho * bal1), pos(duals.mu2 - rho * bal2),
                 pos(duals.kbar1 - rho * (f - flow1)), pos(duals.kun1 - rho * (f + flow1)),
                 pos(duals.kbar2 - rho * (f - flow2)), pos(duals.kun2 - rho * (f + flow2)))


def lmp_update(duals: Duals, ptdf):
    return equilibrium_lmps(duals.mu1, duals.mu2, duals.kbar1, duals.kun1, duals.kbar2,
                            duals.kun2, ptdf)


# --------------------------------------------------------------------------
# best responses


@dataclass(frozen=True)
class FarmData:
    """Private data of one wind farm."""

    features: np.ndarray
    wind: np.ndarray  # MW
    cap: float
    gamma: float
    tau: float


@dataclass(frozen=True)
class FarmSignal:
    """Public information the operator sends to one farm.

    ``da_gap``: day-ahead balance residual of everyone else,
    ``rt_gap``: real-time balance residual of everyone else,
    ``flow``: day-ahead line flows of everyone else (n, m),
    ``sensitivity``: flow change per MW of this farm's forecast (m,).
    """

    lmp_da: np.ndarray
    lmp_rt: np.ndarray
    da_gap: np.ndarray
    rt_gap: np.ndarray
    flow: np.ndarray
    sensitivity: np.ndarray
    line_limit: np.ndarray
    previous: np.ndarray


def farm_signal(case, dataset, j, lmp_da, lmp_rt, it: Iterate) -> FarmSignal:
    W = dataset.wind_mw(case.wind_cap)
    others = it.forecast.copy()
    others[:, j] = 0.0
    ob = to_bus(case, others)
    d = it.decision
    net_da = d.p + ob - case.demand
    rt = d.r_up - d.r_dn + d.shed - ob + to_bus(case, W)
    bus = case.wind_bus[j]
    return FarmSignal(lmp_da[:, bus], lmp_rt[:, bus], net_da.sum(axis=1), rt.sum(axis=1),
                      net_da @ case.ptdf.T, case.ptdf[:, bus], case.line_limit,
                      it.forecast[:, j])


def best_response_wind(data: FarmData, signal: FarmSignal, rho: float, prox: float = 0.0,
                       settings: QPSettings | None = None):
    """Augmented profit maximization of one farm; returns ``(theta, forecast)``.

    The farm sees only its own features and realizations plus ``signal``.
    """
    Phi, w = data.features, data.wind
    n, k = Phi.shape
    lines = np.flatnonzero(np.abs(signal.sensitivity) > 1e-12) if rho > 0 else np.array([], int)
    ml = lines.size
    ns = n * ml
    nv = 2 * k + n + 2 * ns
    i_th, i_f, i_su = np.arange(k), np.arange(2 * k, 2 * k + n), 2 * k + n
    pdiag = np.zeros(nv)
    pdiag[i_f] = 2.0 * data.gamma + 2.0 * rho + prox
    pdiag[i_su:] = rho
    q = np.zeros(nv)
    q[i_f] = (-(signal.lmp_da - signal.lmp_rt) - 2.0 * data.gamma * w
              + rho * signal.da_gap - rho * signal.rt_gap - prox * signal.previous)
    # forecast = cap * Phi theta
    A = sp.hstack([-data.cap * sp.csr_matrix(Phi), sp.csr_matrix((n, k)), sp.identity(n),
                   sp.csr_matrix((n, 2 * ns))], format="csr")
    blk = encode_l1_ball(k, data.tau)
    rows = [sp.hstack([blk.matrix, sp.csr_matrix((blk.matrix.shape[0], n + 2 * ns))])]
    rhs = [blk.rhs]
    if ml:
        sens = signal.sensitivity[lines]
        Fw = sp.kron(sp.identity(n), sp.csr_matrix(sens[:, None]))  # (n*ml, n)
        Is = sp.identity(ns)
        Z = sp.csr_matrix((ns, 2 * k))
        Zs = sp.csr_matrix((ns, ns))
        Zf = sp.csr_matrix((ns, n))
        flow = signal.flow[:, lines].ravel()
        lim = np.tile(signal.line_limit[lines], n)
        rows += [sp.hstack([Z, Fw, -Is, Zs]), sp.hstack([Z, Zf, -Is, Zs]),
                 sp.hstack([Z, -Fw, Zs, -Is]), sp.hstack([Z, Zf, Zs, -Is])]
        rhs += [lim - flow, np.zeros(ns), lim + flow, np.zeros(ns)]
    qp = QuadraticProgram(sp.diags(pdiag), q, A, np.zeros(n), sp.vstack(rows, format="csr"),
                          np.concatenate(rhs))
    sol = solve_qp(qp, settings)
    if not sol.optimal:
        raise_for_status(sol.status, "wind best response")
    return sol.x[i_th].copy(), sol.x[i_f].copy()


def best_response_generators(case: NetworkCase, dataset: Dataset, lmp_da, lmp_rt,
                             it: Iterate, rho: float, prox: float = 0.0,
                             settings: QPSettings | None = None):
    """Per-sample augmented profit maximization of the generator fleet.

    Returns bus-indexed ``(p, r_up, r_dn)``; the other participants enter
    through their previous forecasts and shedding.
    """
    n, m = dataset.n, case.n_line
    g = case.gen_buses
    ng = g.size
    W = dataset.wind_mw(case.wind_cap)
    fb = to_bus(case, it.forecast)
    F = case.ptdf
    base_da = fb - case.demand  # day-ahead injections of everyone else
    base_rt = to_bus(case, W) + it.decision.shed - case.demand  # total real-time, excluding gens
    A_gap = base_da.sum(axis=1)
    B_gap = (-fb + to_bus(case, W) + it.decision.shed).sum(axis=1)
    use_slack = rho > 0 and m > 0
    ms = m if use_slack else 0
    nv = 3 * ng + 4 * ms  # per sample
    C = case.gen_cost_quad[g]
    # per-sample Hessian
    Cm = np.diag(2.0 * C)
    one = np.ones((ng, ng))
    H = np.zeros((nv, nv))
    H[:3 * ng, :3 * ng] = np.block([[Cm, Cm, -Cm], [Cm, Cm, -Cm], [-Cm, -Cm, Cm]])
    H[:ng, :ng] += rho * one
    H[ng:3 * ng, ng:3 * ng] += rho * np.block([[one, -one], [-one, one]])
    H[np.arange(3 * ng), np.arange(3 * ng)] += prox
    H[3 * ng:, 3 * ng:] += rho * np.eye(4 * ms)
    P = sp.kron(sp.identity(n), sp.csr_matrix(H), format="csc")
    prev = it.decision
    qs = np.zeros((n, nv))
    qs[:, :ng] = (case.gen_cost_lin[g] - lmp_da[:, g] + rho * A_gap[:, None]
                  - prox * prev.p[:, g])
    qs[:, ng:2 * ng] = (case.reg_up_cost[g] - lmp_rt[:, g] + rho * B_gap[:, None]
                        - prox * prev.r_up[:, g])
    qs[:, 2 * ng:3 * ng] = (-case.reg_dn_cost[g] + lmp_rt[:, g] - rho * B_gap[:, None]
                            - prox * prev.r_dn[:, g])
    # generator set
    I = np.eye(ng)
    Zg = np.zeros((ng, ng))
    Gs = [np.hstack([I, I, -I]), np.hstack([-I, -I, I]), np.hstack([I, I, Zg]),
          np.hstack([Zg, -I, Zg]), np.hstack([-I, Zg, I]), np.hstack([Zg, Zg, -I])]
    pmax, pmin = case.p_max[g], case.p_min[g]
    hs = [pmax, -pmin, pmax, np.zeros(ng), -pmin, np.zeros(ng)]
    Gblk = np.vstack([np.hstack([M, np.zeros((ng, 4 * ms))]) for M in Gs])
    h_fixed = np.concatenate(hs)
    blocks = [Gblk]
    h_rows = [np.tile(h_fixed, (n, 1))]
    if use_slack:
        Fg = F[:, g]
        Zm = np.zeros((m, m))
        Im = np.eye(m)
        Zgm = np.zeros((m, ng))
        flow_da = base_da @ F.T
        flow_rt = base_rt @ F.T
        blocks += [
            np.hstack([Fg, Zgm, Zgm, -Im, Zm, Zm, Zm]),
            np.hstack([-Fg, Zgm, Zgm, Zm, -Im, Zm, Zm]),
            np.hstack([Fg, Fg, -Fg, Zm, Zm, -Im, Zm]),
            np.hstack([-Fg, -Fg, Fg, Zm, Zm, Zm, -Im]),
            np.hstack([np.zeros((4 * m, 3 * ng)), -np.eye(4 * m)]),
        ]
        f = case.line_limit
        h_rows += [f - flow_da, f + flow_da, f - flow_rt, f + flow_rt, np.zeros((n, 4 * m))]
    Gs_sample = np.vstack(blocks)
    G = sp.kron(sp.identity(n), sp.csr_matrix(Gs_sample), format="csr")
    h = np.hstack(h_rows).ravel()
    qp = QuadraticProgram(P, qs.ravel(), None, None, G, h)
    sol = solve_qp(qp, settings)
    if not sol.optimal:
        raise_for_status(sol.status, "generator best response")
    x = sol.x.reshape(n, nv)
    out = [np.zeros((n, case.n_bus)) for _ in range(3)]
    for a in range(3):
        out[a][:, g] = x[:, a * ng:(a + 1) * ng]
    return tuple(out)


def best_response_loads(case: NetworkCase, dataset: Dataset, lmp_rt, it: Iterate, rho: float,
                        prox: float = 0.0, settings: QPSettings | None = None) -> np.ndarray:
    """Per-sample augmented profit maximization of the loads; bus-indexed shedding."""
    n, m = dataset.n, case.n_line
    ld = case.load_buses
    nl = ld.size
    W = dataset.wind_mw(case.wind_cap)
    fb = to_bus(case, it.forecast)
    d = it.decision
    D_gap = (d.r_up - d.r_dn - fb + to_bus(case, W)).sum(axis=1)
    base_rt = d.p + d.r_up - d.r_dn + to_bus(case, W) - case.demand
    use_slack = rho > 0 and m > 0
    ms = m if use_slack else 0
    nv = nl + 2 * ms
    H = np.zeros((nv, nv))
    H[:nl, :nl] = np.diag(2.0 * case.shed_cost_quad[ld] + prox) + rho * np.ones((nl, nl))
    H[nl:, nl:] = rho * np.eye(2 * ms)
    P = sp.kron(sp.identity(n), sp.csr_matrix(H), format="csc")
    qs = np.zeros((n, nv))
    qs[:, :nl] = (case.shed_cost_lin[ld] - lmp_rt[:, ld] + rho * D_gap[:, None]
                  - prox * d.shed[:, ld])
    Il = np.eye(nl)
    blocks = [np.hstack([Il, np.zeros((nl, 2 * ms))]), np.hstack([-Il, np.zeros((nl, 2 * ms))])]
    h_rows = [np.tile(case.demand[ld], (n, 1)), np.zeros((n, nl))]
    if use_slack:
        Fl = case.ptdf[:, ld]
        Im, Zm = np.eye(m), np.zeros((m, m))
        flow = base_rt @ case.ptdf.T
        f = case.line_limit
        blocks += [np.hstack([Fl, -Im, Zm]), np.hstack([-Fl, Zm, -Im]),
                   np.hstack([np.zeros((2 * m, nl)), -np.eye(2 * m)])]
        h_rows += [f - flow, f + flow, np.zeros((n, 2 * m))]
    G = sp.kron(sp.identity(n), sp.csr_matrix(np.vstack(blocks)), format="csr")
    qp = QuadraticProgram(P, qs.ravel(), None, None, G, np.hstack(h_rows).ravel())
    sol = solve_qp(qp, settings)
    if not sol.optimal:
        raise_for_status(sol.status, "load best response")
    shed = np.zeros((n, case.n_bus))
    shed[:, ld] = sol.x.reshape(n, nv)[:, :nl]
    return shed


# --------------------------------------------------------------------------
# driver


TRACE_FIELDS = ("iteration", "rho", "max_lmp_change", "max_balance_violation",
                "max_flow_violation", "objective")


@dataclass(eq=False)
class AdmmResult:
    solution: EquilibriumSolution
    trace: list
    converged: bool
    iterations: int

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace) -> str:
    """Render trace rows as CSV text with fixed formatting."""
    if not trace:
        return ""
    farms = len(trace[0]["profit"])
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(list(TRACE_FIELDS) + [f"profit_{j + 1}" for j in range(farms)])
    for row in trace:
        wr.writerow([row["iteration"]] + [f"{row[k]:.10g}" for k in TRACE_FIELDS[1:]]
                    + [f"{v:.10g}" for v in row["profit"]])
    return buf.getvalue()


def _initial_state(case, dataset, initial):
    n, m, b, k = dataset.n, case.n_line, case.n_farm, dataset.dim
    if initial is None:
        zero = np.zeros((n, case.n_bus))
        it = Iterate(np.zeros((b, k)), np.zeros((n, b)), DispatchDecision(zero, zero, zero, zero))
        duals = Duals.zeros(n, m)
    else:
        pr = initial.prices
        it = Iterate(np.array(initial.theta.theta), np.array(initial.forecast), initial.dispatch)
        duals = Duals(pr.mu1.copy(), pr.mu2.copy(), pr.kbar1.copy(), pr.kun1.copy(),
                      pr.kbar2.copy(), pr.kun2.copy())
    lmp_da, lmp_rt = lmp_update(duals, case.ptdf)
    return AdmmState(0, duals, lmp_da, lmp_rt, it)


def admm_solve(case: NetworkCase, dataset: Dataset, cfg: GameConfig, schedule: StepSchedule,
               stop: StopRule | None = None, prox: float = 0.0,
               initial: EquilibriumSolution | None = None,
               raise_on_max_iter: bool = True) -> AdmmResult:
    """Iterate best responses and dual steps until the LMPs settle.

    Stops once the largest per-sample, per-bus LMP change stays below
    ``stop.tol`` for ``stop.window`` consecutive iterations. Hitting
    ``stop.max_iter`` raises :class:`MaxIterReached` carrying the last
    iterate unless ``raise_on_max_iter`` is false.

    ``prox`` is relative: at iteration k every block is damped with weight
    ``prox * schedule(k)``, so a changing schedule keeps the damping ratio.
    """
    if dataset.n_farm != case.n_farm:
        raise DimensionMismatch("dataset and case disagree on farm count")
    stop = stop or StopRule()
    settings = cfg.settings
    b = case.n_farm
    gamma, tau = cfg.gammas(b), cfg.taus(b)
    W = dataset.wind_mw(case.wind_cap)
    farms = [FarmData(dataset.features, W[:, j], float(case.wind_cap[j]), float(gamma[j]),
                      float(tau[j])) for j in range(b)]
    state = _initial_state(case, dataset, initial)
    calm, converged = 0, False
    const = float(np.mean(np.sum(gamma * W ** 2, axis=1)))
    for k in range(stop.max_iter):
        rho = schedule(k)
        prev = state.prev
        theta = np.zeros_like(prev.theta)
        forecast = np.zeros_like(prev.forecast)
        for j in range(b):
            sig = farm_signal(case, dataset, j, state.lmp_da, state.lmp_rt, prev)
            theta[j], forecast[:, j] = best_response_wind(farms[j], sig, rho, prox * rho,
                                                          settings)
        p, r_up, r_dn = best_response_generators(case, dataset, state.lmp_da, state.lmp_rt,
                                                 prev, rho, prox * rho, settings)
        shed = best_response_loads(case, dataset, state.lmp_rt, prev, rho, prox * rho, settings)
        it = Iterate(theta, forecast, DispatchDecision(p, r_up, r_dn, shed))
        duals = dual_update(state.duals, case, dataset, it, rho)
        lmp_da, lmp_rt = lmp_update(duals, case.ptdf)
        change = float(max(np.max(np.abs(lmp_da - state.lmp_da)),
                           np.max(np.abs(lmp_rt - state.lmp_rt))))
        bal1, bal2, fl1, fl2 = _residuals(case, W, it)
        flow_viol = float(max(np.max(np.abs(fl1) - case.line_limit, initial=0.0),
                              np.max(np.abs(fl2) - case.line_limit, initial=0.0), 0.0))
        prices = PriceSystem(duals.mu1, duals.mu2, duals.kbar1, duals.kun1, duals.kbar2,
                             duals.kun2, lmp_da, lmp_rt)
        state.trace.append({
            "iteration": k, "rho": rho, "max_lmp_change": change,
            "max_balance_violation": float(max(np.max(np.abs(bal1)), np.max(np.abs(bal2)))),
            "max_flow_violation": flow_viol,
            "objective": potential_value(theta, it.decision, case, dataset, cfg) - const,
            "profit": wind_profits(case, dataset, cfg, forecast, prices),
        })
        state = AdmmState(k + 1, duals, lmp_da, lmp_rt, it, state.trace)
        calm = calm + 1 if change < stop.tol else 0
        if calm >= stop.window:
            converged = True
            break
    it = state.prev
    d = state.duals
    prices = PriceSystem(d.mu1, d.mu2, d.kbar1, d.kun1, d.kbar2, d.kun2, state.lmp_da,
                         state.lmp_rt)
    sol = EquilibriumSolution(RegressionProfile(it.theta), it.forecast, it.decision, prices,
                              state.trace[-1]["objective"] if state.trace else float("nan"),
                              {"iterations": state.k, "converged": converged,
                               "min_dual": d.min()})
    result = AdmmResult(sol, state.trace, converged, state.k)
    if not converged and raise_on_max_iter:
        raise MaxIterReached(f"ADMM did not settle within {stop.max_iter} iterations", result)
    return result
