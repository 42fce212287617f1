"""Two-settlement energy-only market: domain types, clearing and settlement.

All bus-indexed vectors have length ``case.n_bus``. Buses without a
generator carry ``p_min = p_max = 0`` and never get dispatch variables;
clearing results are still reported bus-indexed. Energy is in MWh over an
implicit one-hour period and money in $.

Batched clearing functions take arrays with a leading sample axis and solve
the samples as one block-separable QP; the single-sample functions are thin
wrappers around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvariantViolation
from .qp import QPSettings, QuadraticProgram, Status, raise_for_status, solve_qp

DEFAULT_SETTINGS = QPSettings()
_SNAP = 1e-6  # MW; day-ahead outputs this close to a limit are treated as at it


@dataclass(eq=False)
class NetworkCase:
    """Grid and fleet parameters of a DC network.

    ``gen_cost_quad`` and ``shed_cost_quad`` hold the diagonals of C and S.
    ``wind_bus`` holds 0-based bus positions, one per wind farm.
    """

    ptdf: np.ndarray
    line_limit: np.ndarray
    demand: np.ndarray
    gen_cost_lin: np.ndarray
    gen_cost_quad: np.ndarray
    reg_up_cost: np.ndarray
    reg_dn_cost: np.ndarray
    shed_cost_lin: np.ndarray
    shed_cost_quad: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    wind_bus: np.ndarray
    wind_cap: np.ndarray
    name: str = "case"
    bus_ids: list = field(default_factory=list)
    line_ids: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("line_limit", "demand", "gen_cost_lin", "gen_cost_quad", "reg_up_cost",
                     "reg_dn_cost", "shed_cost_lin", "shed_cost_quad", "p_min", "p_max",
                     "wind_cap"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        self.wind_bus = np.atleast_1d(np.asarray(self.wind_bus, dtype=int))
        nb = self.demand.size
        self.ptdf = np.asarray(self.ptdf, dtype=float).reshape(-1, nb)
        if not self.bus_ids:
            self.bus_ids = list(range(1, nb + 1))
        if not self.line_ids:
            self.line_ids = list(range(1, self.n_line + 1))
        self.validate()

    @property
    def n_bus(self) -> int:
        return self.demand.size

    @property
    def n_line(self) -> int:
        return self.ptdf.shape[0]

    @property
    def n_farm(self) -> int:
        return self.wind_bus.size

    @property
    def gen_buses(self) -> np.ndarray:
        return np.flatnonzero(self.p_max > 0)

    @property
    def load_buses(self) -> np.ndarray:
        return np.flatnonzero(self.demand > 0)

    @property
    def wind_incidence(self) -> np.ndarray:
        """(n_bus, n_farm) 0/1 matrix placing farm outputs on buses."""
        E = np.zeros((self.n_bus, self.n_farm))
        E[self.wind_bus, np.arange(self.n_farm)] = 1.0
        return E

    def validate(self) -> None:
        nb = self.n_bus
        for name in ("gen_cost_lin", "gen_cost_quad", "reg_up_cost", "reg_dn_cost",
                     "shed_cost_lin", "shed_cost_quad", "p_min", "p_max"):
            if getattr(self, name).size != nb:
                raise DimensionMismatch(f"{name} has length {getattr(self, name).size}, "
                                        f"expected n_bus={nb}")
        if self.line_limit.size != self.n_line:
            raise DimensionMismatch("ptdf row count must equal line_limit length")
        if self.wind_cap.size != self.n_farm:
            raise DimensionMismatch("wind_cap must have one entry per wind farm")
        if np.any(self.wind_bus < 0) or np.any(self.wind_bus >= nb):
            raise InvariantViolation("wind_bus index out of range")
        if np.unique(self.wind_bus).size != self.n_farm:
            raise InvariantViolation("at most one wind farm per bus")
        if np.any(self.p_min > self.p_max):
            raise InvariantViolation("p_min must not exceed p_max")
        if np.any(self.line_limit <= 0):
            raise InvariantViolation("line limits must be positive")
        if np.any(self.demand < 0):
            raise InvariantViolation("demand must be nonnegative")
        if np.any(self.wind_cap <= 0):
            raise InvariantViolation("wind capacity must be positive")
        if np.any(self.gen_cost_quad <= 0) or np.any(self.shed_cost_quad <= 0):
            raise InvariantViolation("diagonals of C and S must be strictly positive")
        g = self.gen_buses
        if np.any(self.reg_up_cost[g] <= self.gen_cost_lin[g]) or \
                np.any(self.gen_cost_lin[g] <= self.reg_dn_cost[g]):
            raise InvariantViolation("cost order c_up > c > c_dn violated at a generator bus")

    def permuted(self, perm) -> "NetworkCase":
        """Relabel buses: new bus ``k`` is old bus ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        vec = {n: getattr(self, n)[perm] for n in (
            "demand", "gen_cost_lin", "gen_cost_quad", "reg_up_cost", "reg_dn_cost",
            "shed_cost_lin", "shed_cost_quad", "p_min", "p_max")}
        return replace(self, ptdf=self.ptdf[:, perm], wind_bus=inv[self.wind_bus],
                       bus_ids=[self.bus_ids[k] for k in perm], **vec)

    def max_wind_share(self) -> float:
        """Share of total demand covered by all farms at rated output."""
        return float(self.wind_cap.sum() / self.demand.sum())


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    wind: np.ndarray  # MW, one entry per farm
    id: int = 0


@dataclass(frozen=True)
class RegressionProfile:
    """Stacked per-farm linear forecast models, shape (n_farm, n_feature)."""

    theta: np.ndarray

    def l1_norms(self) -> np.ndarray:
        return np.abs(self.theta).sum(axis=1)

    def within(self, tau, tol: float = 1e-8) -> bool:
        return bool(np.all(self.l1_norms() <= np.asarray(tau) + tol))


@dataclass(frozen=True)
class DispatchDecision:
    """Bus-indexed generator and load decisions; leading axes are sample axes."""

    p: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    shed: np.ndarray

    @property
    def output(self) -> np.ndarray:
        return self.p + self.r_up - self.r_dn

    def netted(self) -> "DispatchDecision":
        """Cancel simultaneous up and down regulation at each generator.

        Output, balances and flows depend on ``r_up - r_dn`` only, and since
        upward regulation costs more than downward, netting never raises cost.
        Solvers leave both positive only at the level of their tolerance.
        """
        net = self.r_up - self.r_dn
        return DispatchDecision(self.p, np.maximum(net, 0.0), np.maximum(-net, 0.0), self.shed)

    def violations(self, case: NetworkCase) -> float:
        """Largest violation of the generator and load-shedding bounds."""
        q = self.output
        parts = [case.p_min - q, q - case.p_max, -self.r_up, self.r_up - (case.p_max - self.p),
                 -self.r_dn, self.r_dn - (self.p - case.p_min), -self.shed,
                 self.shed - case.demand]
        return float(max(np.max(v) for v in parts))


@dataclass(frozen=True)
class PriceSystem:
    """Balance and flow duals per sample plus the LMPs they compose into."""

    mu1: np.ndarray
    mu2: np.ndarray
    kbar1: np.ndarray
    kun1: np.ndarray
    kbar2: np.ndarray
    kun2: np.ndarray
    lmp_da: np.ndarray
    lmp_rt: np.ndarray

    @classmethod
    def from_duals(cls, mu1, mu2, kbar1, kun1, kbar2, kun2, ptdf) -> "PriceSystem":
        lmp_da, lmp_rt = equilibrium_lmps(mu1, mu2, kbar1, kun1, kbar2, kun2, ptdf)
        return cls(np.asarray(mu1, float), np.asarray(mu2, float), np.asarray(kbar1, float),
                   np.asarray(kun1, float), np.asarray(kbar2, float), np.asarray(kun2, float),
                   lmp_da, lmp_rt)

    def min_dual(self) -> float:
        return float(min(np.min(v) if v.size else np.inf for v in (
            self.mu1, self.mu2, self.kbar1, self.kun1, self.kbar2, self.kun2)))


def equilibrium_lmps(mu1, mu2, kbar1, kun1, kbar2, kun2, ptdf):
    """Compose day-ahead and real-time LMPs from balance and flow duals.

    ``lmp_da = mu1 - F'(kbar1 - kun1 + kbar2 - kun2)`` and
    ``lmp_rt = mu2 - F'(kbar2 - kun2)``. Leading sample axes broadcast.
    """
    F = np.asarray(ptdf, dtype=float)
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    ks = [np.asarray(k, float) for k in (kbar1, kun1, kbar2, kun2)]
    for k in ks:
        if k.shape[-1:] != (F.shape[0],):
            raise DimensionMismatch(f"flow duals have {k.shape[-1:]} lines, PTDF has {F.shape[0]}")
    if mu1.shape != ks[0].shape[:-1] or mu2.shape != ks[0].shape[:-1]:
        raise DimensionMismatch("balance duals and flow duals disagree on sample axes")
    ones = np.ones(F.shape[1])
    cong_rt = (ks[2] - ks[3]) @ F
    lmp_rt = mu2[..., None] * ones - cong_rt
    lmp_da = mu1[..., None] * ones - (ks[0] - ks[1]) @ F - cong_rt
    return lmp_da, lmp_rt


# --------------------------------------------------------------------------
# clearing


@dataclass(eq=False)
class DayAheadResult:
    p: np.ndarray
    mu1: np.ndarray
    kbar1: np.ndarray
    kun1: np.ndarray
    lmp: np.ndarray
    objective: np.ndarray
    solutions: list = field(default_factory=list, repr=False)
    qps: list = field(default_factory=list, repr=False)


@dataclass(eq=False)
class RealTimeResult:
    r_up: np.ndarray
    r_dn: np.ndarray
    shed: np.ndarray
    mu2: np.ndarray
    kbar2: np.ndarray
    kun2: np.ndarray
    lmp: np.ndarray
    objective: np.ndarray
    incremental_cost: np.ndarray
    solutions: list = field(default_factory=list, repr=False)
    qps: list = field(default_factory=list, repr=False)


def _first(result):
    """Strip the sample axis of a batched result holding one sample."""
    out = {}
    for k, v in vars(result).items():
        out[k] = v if k in ("solutions", "qps") else (v[0] if np.ndim(v) else v)
    for k in ("objective", "mu1", "mu2", "incremental_cost"):
        if k in out:
            out[k] = float(out[k])
    return type(result)(**out)


def _check_bus_matrix(case, arr, name):
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    if arr.shape[-1] != case.n_bus:
        raise DimensionMismatch(f"{name} must have length n_bus={case.n_bus}")
    return arr


def _solve_chunked(build, n, chunk, settings, what, ids):
    """Solve samples in chunks of ``chunk``.

    A chunk the backend cannot finish is bisected and re-solved, so a
    numerically awkward stack of samples does not sink samples that solve
    on their own. Only a failing single-sample problem raises, and the
    error lists every such sample id.
    """
    sols, qps, bad, status = [], [], [], None

    def run(idx):
        nonlocal status
        qp = build(idx)
        sol = solve_qp(qp, settings)
        if sol.optimal:
            sols.append((idx, sol))
            qps.append(qp)
        elif idx.size > 1:
            half = idx.size // 2
            run(idx[:half])
            run(idx[half:])
        else:
            bad.append(int(ids[idx[0]]))
            if status is None or sol.status is Status.INFEASIBLE:
                status = sol.status

    for start in range(0, n, chunk):
        run(np.arange(start, min(n, start + chunk)))
    if bad:
        raise_for_status(status, what, bad)
    return sols, qps


def _day_ahead_qp(case, net_fixed, idx):
    """net_fixed: (n, n_bus) forecast minus demand for the selected samples."""
    g = case.gen_buses
    ng, m, k = g.size, case.n_line, idx.size
    Fg = case.ptdf[:, g]
    Ik = sp.identity(k, format="csr")
    P = sp.kron(Ik, sp.diags(2.0 * case.gen_cost_quad[g]), format="csc")
    q = np.tile(case.gen_cost_lin[g], k)
    A = sp.kron(Ik, sp.csr_matrix(np.ones((1, ng))), format="csr")
    net = net_fixed[idx]
    b = -net.sum(axis=1)
    flow0 = net @ case.ptdf.T  # (k, m)
    Iblk = sp.kron(Ik, sp.identity(ng), format="csr")
    G = sp.vstack([sp.kron(Ik, sp.csr_matrix(Fg)), -sp.kron(Ik, sp.csr_matrix(Fg)),
                   Iblk, -Iblk], format="csr")
    h = np.concatenate([(case.line_limit - flow0).ravel(), (case.line_limit + flow0).ravel(),
                        np.tile(case.p_max[g], k), -np.tile(case.p_min[g], k)])
    rows = {"flow_up": ("ineq", np.arange(k * m)), "flow_dn": ("ineq", np.arange(k * m, 2 * k * m))}
    return QuadraticProgram(P, q, A, b, G, h, index={"p": np.arange(k * ng)}, rows=rows)


def clear_day_ahead_batch(case: NetworkCase, forecast, settings: QPSettings | None = None,
                          ids=None, chunk: int = 25) -> DayAheadResult:
    """Day-ahead clearing for each row of ``forecast`` (n, n_bus)."""
    settings = settings or DEFAULT_SETTINGS
    forecast = _check_bus_matrix(case, forecast, "forecast")
    n, m, g = forecast.shape[0], case.n_line, case.gen_buses
    ids = np.arange(n) if ids is None else np.asarray(ids)
    net = forecast - case.demand
    sols, qps = _solve_chunked(lambda idx: _day_ahead_qp(case, net, idx), n, chunk, settings,
                               "day-ahead clearing", ids)
    p = np.zeros((n, case.n_bus))
    mu1 = np.zeros(n)
    kbar, kun = np.zeros((n, m)), np.zeros((n, m))
    for idx, sol in sols:
        k = idx.size
        p[np.ix_(idx, g)] = sol.x.reshape(k, g.size)
        mu1[idx] = -sol.y_eq
        kbar[idx] = sol.y_ineq[: k * m].reshape(k, m)
        kun[idx] = sol.y_ineq[k * m: 2 * k * m].reshape(k, m)
    zeros = np.zeros_like(kbar)
    lmp, _ = equilibrium_lmps(mu1, mu1, kbar, kun, zeros, zeros, case.ptdf)
    objective = np.einsum("nb,b,nb->n", p, case.gen_cost_quad, p) + p @ case.gen_cost_lin
    return DayAheadResult(p, mu1, kbar, kun, lmp, objective, [s for _, s in sols], qps)


def clear_day_ahead(case: NetworkCase, forecast, settings: QPSettings | None = None) -> DayAheadResult:
    """Clear the day-ahead market for one forecast vector (length n_bus).

    Minimizes ``p'Cp + c'p`` subject to system balance, PTDF flow limits and
    generator limits. ``mu1`` is the balance price, ``kbar1``/``kun1`` the
    upper/lower flow-limit duals.
    """
    return _first(clear_day_ahead_batch(case, forecast, settings))


def _real_time_qp(case, p_star, net_rt, wind_dev, idx):
    """p_star: dispatch; net_rt: p* + w - d; wind_dev: sum(w - w_hat) per sample."""
    g, ld = case.gen_buses, case.load_buses
    ng, nl, m, k = g.size, ld.size, case.n_line, idx.size
    Ik = sp.identity(k, format="csr")
    C2 = 2.0 * case.gen_cost_quad[g]
    S2 = 2.0 * case.shed_cost_quad[ld]
    nr = k * ng
    Pr = sp.kron(Ik, sp.diags(C2), format="csr")
    P = sp.bmat([[Pr, -Pr, None], [-Pr, Pr, None],
                 [None, None, sp.kron(Ik, sp.diags(S2))]], format="csc")
    ps = p_star[idx][:, g]
    lin_q = (ps * C2).ravel()
    q = np.concatenate([lin_q + np.tile(case.reg_up_cost[g], k),
                        -lin_q - np.tile(case.reg_dn_cost[g], k),
                        np.tile(case.shed_cost_lin[ld], k)])
    constant = float(np.sum(ps * ps * case.gen_cost_quad[g]))
    one_g = sp.kron(Ik, sp.csr_matrix(np.ones((1, ng))))
    A_bal = sp.hstack([one_g, -one_g, sp.kron(Ik, sp.csr_matrix(np.ones((1, nl))))],
                      format="csr")
    Fg = sp.kron(Ik, sp.csr_matrix(case.ptdf[:, g]))
    Fl = sp.kron(Ik, sp.csr_matrix(case.ptdf[:, ld]))
    flow0 = (net_rt[idx] @ case.ptdf.T).ravel()
    Ig = sp.identity(nr, format="csr")
    Il = sp.identity(k * nl, format="csr")
    Zgl, Zlg = sp.csr_matrix((nr, k * nl)), sp.csr_matrix((k * nl, nr))
    Zgg = sp.csr_matrix((nr, nr))
    psr = ps.ravel()
    up_room = np.tile(case.p_max[g], k) - psr
    dn_room = psr - np.tile(case.p_min[g], k)
    # A zero regulation range is written as r = 0 rather than 0 <= r <= 0: the
    # hidden equality would leave the bound duals unbounded. The net-output
    # limits p_min <= p* + r+ - r- <= p_max follow from the ranges and are omitted.
    free_up, free_dn = np.flatnonzero(up_room > 0), np.flatnonzero(dn_room > 0)
    fix_up, fix_dn = np.flatnonzero(up_room <= 0), np.flatnonzero(dn_room <= 0)
    Sel = lambda rows: Ig[rows]
    Zr = lambda rows: sp.csr_matrix((rows.size, nr))
    Zl = lambda rows: sp.csr_matrix((rows.size, k * nl))
    A = sp.vstack([A_bal,
                   sp.hstack([Sel(fix_up), Zr(fix_up), Zl(fix_up)]),
                   sp.hstack([Zr(fix_dn), Sel(fix_dn), Zl(fix_dn)])], format="csr")
    b = np.concatenate([-wind_dev[idx], np.zeros(fix_up.size + fix_dn.size)])
    G = sp.vstack([
        sp.hstack([Fg, -Fg, Fl]),
        sp.hstack([-Fg, Fg, -Fl]),
        sp.hstack([Sel(free_up), Zr(free_up), Zl(free_up)]),     # r+ <= p_max - p*
        sp.hstack([-Sel(free_up), Zr(free_up), Zl(free_up)]),    # r+ >= 0
        sp.hstack([Zr(free_dn), Sel(free_dn), Zl(free_dn)]),     # r- <= p* - p_min
        sp.hstack([Zr(free_dn), -Sel(free_dn), Zl(free_dn)]),    # r- >= 0
        sp.hstack([Zlg, Zlg, Il]),                               # shed <= d
        sp.hstack([Zlg, Zlg, -Il]),                              # shed >= 0
    ], format="csr")
    h = np.concatenate([
        np.tile(case.line_limit, k) - flow0,
        np.tile(case.line_limit, k) + flow0,
        up_room[free_up], np.zeros(free_up.size), dn_room[free_dn], np.zeros(free_dn.size),
        np.tile(case.demand[ld], k), np.zeros(k * nl),
    ])
    rows = {"balance": ("eq", np.arange(k)),
            "flow_up": ("ineq", np.arange(k * m)), "flow_dn": ("ineq", np.arange(k * m, 2 * k * m))}
    index = {"r_up": np.arange(nr), "r_dn": np.arange(nr, 2 * nr),
             "shed": np.arange(2 * nr, 2 * nr + k * nl)}
    return QuadraticProgram(P, q, A, b, G, h, constant=constant, index=index, rows=rows)


def clear_real_time_batch(case: NetworkCase, p_star, forecast, actual,
                          settings: QPSettings | None = None, ids=None,
                          chunk: int = 25) -> RealTimeResult:
    """Real-time clearing for each sample row; see :func:`clear_real_time`."""
    settings = settings or DEFAULT_SETTINGS
    forecast = _check_bus_matrix(case, forecast, "forecast")
    actual = _check_bus_matrix(case, actual, "actual")
    p_star = _check_bus_matrix(case, p_star, "p_star")
    # solver noise may put p* a hair outside its box, which would empty the regulation
    # range; within _SNAP of a bound it is also moved onto the bound
    p_star = np.clip(p_star, case.p_min, case.p_max)
    p_star = np.where(p_star - case.p_min <= _SNAP, case.p_min, p_star)
    p_star = np.where(case.p_max - p_star <= _SNAP, case.p_max, p_star)
    n, m = forecast.shape[0], case.n_line
    g, ld = case.gen_buses, case.load_buses
    ids = np.arange(n) if ids is None else np.asarray(ids)
    net_rt = p_star + actual - case.demand
    wind_dev = (actual - forecast).sum(axis=1)
    sols, qps = _solve_chunked(lambda idx: _real_time_qp(case, p_star, net_rt, wind_dev, idx),
                               n, chunk, settings, "real-time clearing", ids)
    r_up, r_dn, shed = (np.zeros((n, case.n_bus)) for _ in range(3))
    mu2 = np.zeros(n)
    kbar, kun = np.zeros((n, m)), np.zeros((n, m))
    for idx, sol in sols:
        k, ng, nl = idx.size, g.size, ld.size
        x = sol.x
        r_up[np.ix_(idx, g)] = x[: k * ng].reshape(k, ng)
        r_dn[np.ix_(idx, g)] = x[k * ng: 2 * k * ng].reshape(k, ng)
        shed[np.ix_(idx, ld)] = x[2 * k * ng:].reshape(k, nl)
        mu2[idx] = -sol.y_eq[:k]
        kbar[idx] = sol.y_ineq[: k * m].reshape(k, m)
        kun[idx] = sol.y_ineq[k * m: 2 * k * m].reshape(k, m)
    # net simultaneous regulation left at solver tolerance (see DispatchDecision.netted)
    r_up, r_dn = np.maximum(r_up - r_dn, 0.0), np.maximum(r_dn - r_up, 0.0)
    zeros = np.zeros_like(kbar)
    _, lmp = equilibrium_lmps(mu2, mu2, zeros, zeros, kbar, kun, case.ptdf)
    q_out = p_star + r_up - r_dn
    C, S = case.gen_cost_quad, case.shed_cost_quad
    objective = (np.einsum("nb,b,nb->n", q_out, C, q_out) + r_up @ case.reg_up_cost
                 - r_dn @ case.reg_dn_cost + np.einsum("nb,b,nb->n", shed, S, shed)
                 + shed @ case.shed_cost_lin)
    incremental = objective - np.einsum("nb,b,nb->n", p_star, C, p_star)
    return RealTimeResult(r_up, r_dn, shed, mu2, kbar, kun, lmp, objective, incremental,
                          [s for _, s in sols], qps)


def clear_real_time(case: NetworkCase, p_star, forecast, actual,
                    settings: QPSettings | None = None) -> RealTimeResult:
    """Clear the real-time market given day-ahead dispatch and realized wind.

    Minimizes the re-dispatch cost over up/down regulation and load shedding
    subject to the real-time balance, the post-deviation flow limits and the
    regulation ranges left by ``p_star``. ``incremental_cost`` is the
    objective minus ``p*'Cp*`` so that zero deviation costs nothing.
    """
    return _first(clear_real_time_batch(case, p_star, forecast, actual, settings))


@dataclass(eq=False)
class TwoStageClearing:
    """Sequential day-ahead then real-time clearing of a batch of samples.

    Prices are each market's own LMP: the day-ahead LMP carries only
    day-ahead congestion and the real-time LMP only real-time congestion.
    """

    forecast: np.ndarray
    actual: np.ndarray
    da: DayAheadResult
    rt: RealTimeResult
    ids: np.ndarray

    @property
    def decision(self) -> DispatchDecision:
        return DispatchDecision(self.da.p, self.rt.r_up, self.rt.r_dn, self.rt.shed)

    @property
    def cost_da(self) -> np.ndarray:
        return self.da.objective

    @property
    def cost_rt(self) -> np.ndarray:
        return self.rt.incremental_cost

    @property
    def cost_total(self) -> np.ndarray:
        return self.da.objective + self.rt.incremental_cost

    @property
    def lmp_da(self) -> np.ndarray:
        return self.da.lmp

    @property
    def lmp_rt(self) -> np.ndarray:
        return self.rt.lmp

    def solutions(self):
        return list(zip(self.da.qps, self.da.solutions)) + list(zip(self.rt.qps, self.rt.solutions))


def clear_two_stage(case: NetworkCase, forecast, actual, settings: QPSettings | None = None,
                    ids=None) -> TwoStageClearing:
    forecast = _check_bus_matrix(case, forecast, "forecast")
    actual = _check_bus_matrix(case, actual, "actual")
    ids = np.arange(forecast.shape[0]) if ids is None else np.asarray(ids)
    da = clear_day_ahead_batch(case, forecast, settings, ids=ids)
    rt = clear_real_time_batch(case, da.p, forecast, actual, settings, ids=ids)
    return TwoStageClearing(forecast, actual, da, rt, ids)


# --------------------------------------------------------------------------
# settlement


@dataclass(frozen=True)
class Settlement:
    """Per-sample payments; farm-indexed arrays end with an n_farm axis."""

    wind_revenue: np.ndarray
    wind_profit: np.ndarray
    gen_revenue: np.ndarray
    gen_profit: np.ndarray
    load_payment: np.ndarray
    load_profit: np.ndarray
    demand_charge: np.ndarray


def farm_forecasts(case: NetworkCase, theta, features) -> np.ndarray:
    """MW forecasts ``cap_j * theta_j'phi`` with shape (..., n_farm)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    features = np.asarray(features, dtype=float)
    if theta.shape != (case.n_farm, features.shape[-1]):
        raise DimensionMismatch(f"theta must have shape ({case.n_farm}, {features.shape[-1]})")
    return (features @ theta.T) * case.wind_cap


def to_bus(case: NetworkCase, farm_values) -> np.ndarray:
    """Map farm-indexed values (..., n_farm) onto buses (..., n_bus)."""
    farm_values = np.asarray(farm_values, dtype=float)
    out = np.zeros(farm_values.shape[:-1] + (case.n_bus,))
    out[..., case.wind_bus] = farm_values
    return out


def settle_forecasts(case: NetworkCase, lmp_da, lmp_rt, forecast, wind,
                     decision: DispatchDecision, gamma=None) -> Settlement:
    """Settle farm forecasts ``forecast`` (..., n_farm) against ``wind`` (MW)."""
    lmp_da, lmp_rt = np.asarray(lmp_da, float), np.asarray(lmp_rt, float)
    forecast, wind = np.asarray(forecast, float), np.asarray(wind, float)
    if lmp_da.shape[-1] != case.n_bus or lmp_rt.shape[-1] != case.n_bus:
        raise DimensionMismatch("LMP vectors must be bus-indexed")
    if forecast.shape != wind.shape or forecast.shape[-1] != case.n_farm:
        raise DimensionMismatch("forecast and wind must both be (..., n_farm)")
    l1 = lmp_da[..., case.wind_bus]
    l2 = lmp_rt[..., case.wind_bus]
    revenue = l1 * forecast + l2 * (wind - forecast)
    gamma = np.zeros(case.n_farm) if gamma is None else np.broadcast_to(gamma, (case.n_farm,))
    profit = revenue - gamma * (forecast - wind) ** 2
    d = decision
    q_out = d.p + d.r_up - d.r_dn
    gen_revenue = np.sum(lmp_da * d.p + lmp_rt * (d.r_up - d.r_dn), axis=-1)
    gen_cost = (np.sum(case.gen_cost_quad * q_out ** 2, axis=-1) + d.p @ case.gen_cost_lin
                + d.r_up @ case.reg_up_cost - d.r_dn @ case.reg_dn_cost)
    load_payment = np.sum(lmp_rt * d.shed, axis=-1)
    load_cost = np.sum(case.shed_cost_quad * d.shed ** 2, axis=-1) + d.shed @ case.shed_cost_lin
    demand_charge = lmp_da @ case.demand - load_payment
    return Settlement(revenue, profit, gen_revenue, gen_revenue - gen_cost, load_payment,
                      load_payment - load_cost, demand_charge)


def settle(lmp_da, lmp_rt, theta, decision: DispatchDecision, sample, case: NetworkCase,
           gamma=None) -> Settlement:
    """Settle one sample (or a batch exposing ``features`` and MW ``wind``).

    Farm ``j`` earns ``lmp_da[bus_j] * f_j + lmp_rt[bus_j] * (w_j - f_j)``
    where ``f_j`` is its MW forecast; ``wind_profit`` further subtracts the
    regression loss ``gamma_j * (f_j - w_j)**2``.
    """
    forecast = farm_forecasts(case, theta, sample.features)
    return settle_forecasts(case, lmp_da, lmp_rt, forecast, sample.wind, decision, gamma)
