"""Convex quadratic programs with dual recovery.

Every solve in the package goes through :func:`solve_qp`, which accepts a
single standard form

    minimize    1/2 x'Px + q'x + constant
    subject to  A x  = b          (multipliers y_eq, free)
                G x <= h          (multipliers y_ineq >= 0)

and returns multipliers under the Lagrangian convention

    L(x, y, z) = 1/2 x'Px + q'x + y'(Ax - b) + z'(Gx - h),

so stationarity reads ``Px + q + A'y + G'z = 0``. A balance row written as
"sum of injections = 0" therefore carries a price equal to ``-y``: the
multiplier is the negative of the marginal cost of serving one more MWh.

Backends: Clarabel (interior point, default), OSQP (operator splitting) and
CVXOPT (interior point). The second and third are used for cross-solver
audits; acceptance tests only talk to this module's interface.
"""

from __future__ import annotations

import contextlib
import enum
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (ContractError, DimensionMismatch, Infeasible, NonpositiveRadius,
                     UnboundedOrNumerical)


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    NUMERICAL = "Numerical"


@dataclass(frozen=True)
class QPSettings:
    tol: float = 1e-8
    max_iter: int = 200
    backend: str = "clarabel"
    time_limit: float | None = None
    verbose: bool = False


@dataclass(eq=False)
class QuadraticProgram:
    """Immutable QP in the package's standard form.

    ``index`` maps variable-group names to index arrays into ``x`` and
    ``rows`` maps constraint-group names to ``("eq" | "ineq", index array)``,
    so structured primal and dual blocks can be pulled out by name.
    """

    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    constant: float = 0.0
    index: dict = field(default_factory=dict)
    rows: dict = field(default_factory=dict)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.P = _as_csc(self.P, (n, n))
        self.A = _as_csc(self.A, (None, n))
        self.G = _as_csc(self.G, (None, n))
        self.b = np.asarray([] if self.b is None else self.b, dtype=float).ravel()
        self.h = np.asarray([] if self.h is None else self.h, dtype=float).ravel()
        if self.A.shape[0] != self.b.size:
            raise DimensionMismatch(f"A has {self.A.shape[0]} rows but b has {self.b.size}")
        if self.G.shape[0] != self.h.size:
            raise DimensionMismatch(f"G has {self.G.shape[0]} rows but h has {self.h.size}")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-10 * max(1.0, abs(self.P).max()):
            raise ValueError("quadratic term P is not symmetric")
        for arr in (self.q, self.b, self.h):
            arr.setflags(write=False)

    @property
    def n_var(self) -> int:
        return self.q.size

    @property
    def n_eq(self) -> int:
        return self.b.size

    @property
    def n_ineq(self) -> int:
        return self.h.size

    def check_psd(self, floor: float = -1e-8) -> float:
        """Return the smallest eigenvalue of P, raising if it is below ``floor``.

        Dense eigendecomposition, meant for debugging small problems.
        """
        lam = float(np.linalg.eigvalsh(self.P.toarray()).min()) if self.n_var else 0.0
        if lam < floor:
            raise ValueError(f"P has eigenvalue {lam:.3e} < {floor:.1e}")
        return lam

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)

    def permuted(self, eq_perm=None, ineq_perm=None) -> "QuadraticProgram":
        """Copy with constraint rows reordered (row labels are dropped)."""
        eq_perm = np.arange(self.n_eq) if eq_perm is None else np.asarray(eq_perm)
        ineq_perm = np.arange(self.n_ineq) if ineq_perm is None else np.asarray(ineq_perm)
        return QuadraticProgram(
            self.P, self.q, self.A[eq_perm], self.b[eq_perm],
            self.G[ineq_perm], self.h[ineq_perm], self.constant, dict(self.index),
        )


def _as_csc(M, shape):
    if M is None:
        return sp.csc_matrix((0, shape[1]))
    M = sp.csc_matrix(M, dtype=float)
    if shape[0] is not None and M.shape[0] != shape[0]:
        raise DimensionMismatch(f"expected {shape[0]} rows, got {M.shape[0]}")
    if M.shape[1] != shape[1]:
        raise DimensionMismatch(f"expected {shape[1]} columns, got {M.shape[1]}")
    return M


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal_eq: float
    primal_ineq: float
    dual_ineq: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_ineq,
                   self.dual_ineq, self.complementarity)


@dataclass(eq=False)
class QPSolution:
    x: np.ndarray
    y_eq: np.ndarray
    y_ineq: np.ndarray
    status: Status
    objective: float
    iterations: int = 0
    solve_time: float = 0.0
    backend: str = ""
    kkt: KKTResiduals | None = None

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def kkt_residuals(qp: QuadraticProgram, sol: QPSolution) -> KKTResiduals:
    """Max-norm KKT residuals recomputed from ``(qp, sol)`` alone."""
    if sol.status is not Status.OPTIMAL:
        raise ContractError(f"kkt_residuals needs an Optimal solution, got {sol.status.value}")
    x, y, z = sol.x, sol.y_eq, sol.y_ineq
    grad = qp.P @ x + qp.q + qp.A.T @ y + qp.G.T @ z
    slack = qp.h - qp.G @ x

    def _inf(v):
        return float(np.max(np.abs(v))) if v.size else 0.0

    return KKTResiduals(
        stationarity=_inf(grad),
        primal_eq=_inf(qp.A @ x - qp.b),
        primal_ineq=_inf(np.maximum(-slack, 0.0)),
        dual_ineq=_inf(np.maximum(-z, 0.0)),
        complementarity=_inf(z * slack),
    )


def raise_for_status(status: Status, what: str, sample_ids=None) -> None:
    """Raise the package error matching a non-optimal ``status``."""
    if status is Status.INFEASIBLE:
        raise Infeasible(f"{what} is infeasible", status=status, sample_ids=sample_ids)
    raise UnboundedOrNumerical(f"{what} failed with status {status.value}", status=status,
                               sample_ids=sample_ids)


_RECORDERS: list = []


@contextlib.contextmanager
def record_solves():
    """Collect ``(status, kkt max residual, n_var)`` of every solve in the block."""
    log: list = []
    _RECORDERS.append(log)
    try:
        yield log
    finally:
        _RECORDERS.remove(log)


def solve_qp(qp: QuadraticProgram, settings: QPSettings | None = None) -> QPSolution:
    """Solve ``qp``; never raises on solver trouble, inspect ``status`` instead."""
    settings = settings or QPSettings()
    try:
        backend = _BACKENDS[settings.backend]
    except KeyError:
        raise ValueError(f"unknown QP backend {settings.backend!r}") from None
    t0 = time.perf_counter()
    sol = backend(qp, settings)
    sol.solve_time = time.perf_counter() - t0
    sol.backend = settings.backend
    if sol.status is Status.OPTIMAL:
        sol.objective = qp.objective(sol.x)
        sol.kkt = kkt_residuals(qp, sol)
    for log in _RECORDERS:
        log.append((sol.status, sol.kkt.max() if sol.kkt else float("nan"), qp.n_var))
    return sol


def _stacked(qp):
    M = sp.vstack([qp.A, qp.G], format="csc")
    return M, np.concatenate([qp.b, qp.h])


# (relative gap factor, equilibration, static regularization), tried in order
# until the KKT check passes
_CLARABEL_LADDER = ((1.0, True, True), (1e-3, True, True), (1.0, False, False),
                    (1e-3, False, False), (1.0, True, False), (1e-6, True, True))


def _solve_clarabel(qp, settings):
    """Interior-point solve, retried with other settings while needed.

    Clarabel stops once the duality gap is small relative to the objective,
    which on problems with large costs leaves absolute complementarity far
    above ``tol``. On degenerate problems its equilibration and static
    regularization can also steer toward huge or biased duals. Attempts walk down ``_CLARABEL_LADDER`` until the
    recomputed KKT residual is within ``10 * tol``; otherwise the optimal
    attempt with the smallest residual is returned.
    """
    first = best = None
    best_kkt = np.inf
    iterations = 0
    for factor, equilibrate, regularize in _CLARABEL_LADDER:
        sol = _clarabel_once(qp, settings, max(settings.tol * factor, 1e-15), equilibrate,
                             regularize)
        iterations += sol.iterations
        first = first or sol
        if sol.status is not Status.OPTIMAL:
            continue
        k = kkt_residuals(qp, sol).max()
        if k < best_kkt:
            best, best_kkt = sol, k
        if k <= 10 * settings.tol:
            break
    sol = best or first
    sol.iterations = iterations
    return sol


def _clarabel_once(qp, settings, gap_rel, equilibrate=True, regularize=True):
    import clarabel

    M, rhs = _stacked(qp)
    cones = []
    if qp.n_eq:
        cones.append(clarabel.ZeroConeT(qp.n_eq))
    if qp.n_ineq:
        cones.append(clarabel.NonnegativeConeT(qp.n_ineq))
    opts = clarabel.DefaultSettings()
    opts.verbose = settings.verbose
    opts.max_iter = settings.max_iter
    opts.tol_gap_abs = settings.tol
    opts.tol_gap_rel = gap_rel
    opts.equilibrate_enable = equilibrate
    opts.static_regularization_enable = regularize
    opts.tol_feas = settings.tol
    opts.tol_ktratio = max(settings.tol, 1e-10)
    if settings.time_limit is not None:
        opts.time_limit = settings.time_limit
    P = sp.triu(qp.P, format="csc")
    res = clarabel.DefaultSolver(P, np.array(qp.q), M, rhs, cones, opts).solve()
    name = str(res.status)
    status = {
        "Solved": Status.OPTIMAL,
        "PrimalInfeasible": Status.INFEASIBLE,
        "AlmostPrimalInfeasible": Status.INFEASIBLE,
        "MaxIterations": Status.MAX_ITER,
        "MaxTime": Status.MAX_ITER,
    }.get(name, Status.NUMERICAL)
    x = np.asarray(res.x, dtype=float)
    z = np.asarray(res.z, dtype=float)
    sol = QPSolution(x, z[: qp.n_eq], z[qp.n_eq:], status, float(res.obj_val),
                     iterations=int(res.iterations))
    if name == "AlmostSolved":
        # accept only when our own residual check agrees
        sol.status = Status.OPTIMAL
        if kkt_residuals(qp, sol).max() > 1e-6:
            sol.status = Status.NUMERICAL
    return sol


def _solve_osqp(qp, settings):
    import osqp

    M, rhs = _stacked(qp)
    lower = np.concatenate([qp.b, np.full(qp.n_ineq, -np.inf)])
    solver = osqp.OSQP()
    solver.setup(
        P=sp.triu(qp.P, format="csc"), q=np.array(qp.q), A=M, l=lower, u=rhs,
        eps_abs=settings.tol, eps_rel=settings.tol, max_iter=max(settings.max_iter, 100000),
        polishing=True, verbose=settings.verbose,
    )
    res = solver.solve()
    name = str(res.info.status).lower()
    if "infeasible" in name and "dual" not in name:
        status = Status.INFEASIBLE
    elif name.startswith("solved"):
        status = Status.OPTIMAL
    elif "maximum iterations" in name:
        status = Status.MAX_ITER
    else:
        status = Status.NUMERICAL
    x = np.asarray(res.x, dtype=float)
    y = np.asarray(res.y, dtype=float)
    return QPSolution(x, y[: qp.n_eq], np.maximum(y[qp.n_eq:], 0.0), status,
                      float(res.info.obj_val), iterations=int(res.info.iter))


def _solve_cvxopt(qp, settings):
    import cvxopt
    from cvxopt import solvers

    def _sp(M):
        M = M.tocoo()
        return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), M.shape)

    saved = dict(solvers.options)
    solvers.options.update(show_progress=settings.verbose, abstol=settings.tol,
                           reltol=settings.tol, feastol=settings.tol,
                           maxiters=settings.max_iter)
    try:
        kwargs = {}
        if qp.n_eq:
            kwargs = dict(A=_sp(qp.A), b=cvxopt.matrix(np.array(qp.b)))
        res = solvers.qp(_sp(qp.P), cvxopt.matrix(np.array(qp.q)), _sp(qp.G),
                         cvxopt.matrix(np.array(qp.h)), **kwargs)
    except ValueError:
        return QPSolution(np.zeros(qp.n_var), np.zeros(qp.n_eq), np.zeros(qp.n_ineq),
                          Status.NUMERICAL, np.nan)
    finally:
        solvers.options.clear()
        solvers.options.update(saved)
    status = {
        "optimal": Status.OPTIMAL,
        "primal infeasible": Status.INFEASIBLE,
    }.get(res["status"], Status.MAX_ITER if res["status"] == "unknown" else Status.NUMERICAL)
    ravel = lambda v: np.zeros(0) if v is None else np.asarray(v, dtype=float).ravel()
    return QPSolution(ravel(res["x"]), ravel(res["y"]), ravel(res["z"]), status,
                      float(res["primal objective"] or np.nan), iterations=int(res["iterations"]))


_BACKENDS = {"clarabel": _solve_clarabel, "osqp": _solve_osqp, "cvxopt": _solve_cvxopt}


# --------------------------------------------------------------------------
# l1 ball


@dataclass(frozen=True)
class L1BallBlock:
    """Rows ``matrix @ [theta; t] <= rhs`` encoding ``||theta||_1 <= tau``.

    The rows are ``theta - t <= 0``, ``-theta - t <= 0`` and ``sum(t) <= tau``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dim: int
    tau: float

    def feasible(self, theta, t, tol: float = 0.0) -> bool:
        v = np.concatenate([np.ravel(theta), np.ravel(t)])
        return bool(np.all(self.matrix @ v <= self.rhs + tol))


def encode_l1_ball(dim: int, tau: float) -> L1BallBlock:
    if tau <= 0:
        raise NonpositiveRadius(f"l1 radius must be positive, got {tau}")
    if dim < 1:
        raise ValueError("dim must be at least 1")
    eye = sp.identity(dim, format="csr")
    M = sp.vstack([
        sp.hstack([eye, -eye]),
        sp.hstack([-eye, -eye]),
        sp.hstack([sp.csr_matrix((1, dim)), sp.csr_matrix(np.ones((1, dim)))]),
    ], format="csr")
    rhs = np.concatenate([np.zeros(2 * dim), [float(tau)]])
    return L1BallBlock(M, rhs, dim, float(tau))


def project_l1_ball(v, tau: float) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x||_1 <= tau}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    if np.abs(v).sum() <= tau:
        return v.copy()
    u = np.sort(np.abs(v))[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    rho = np.nonzero(u * k > css - tau)[0][-1]
    thr = (css[rho] - tau) / (rho + 1.0)
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


# --------------------------------------------------------------------------
# debug dump
#
# Text format, one item per line:
#   regeq-qp 1
#   dims <n_var> <n_eq> <n_ineq>
#   constant <value>
#   P <nnz>   followed by nnz lines "row col value"   (full symmetric P)
#   A <nnz>   ...
#   G <nnz>   ...
#   q <n_var> followed by one value per line; same for b and h


def dump_qp(qp: QuadraticProgram, path) -> None:
    lines = ["regeq-qp 1", f"dims {qp.n_var} {qp.n_eq} {qp.n_ineq}",
             f"constant {qp.constant!r}"]
    for name, M in (("P", qp.P), ("A", qp.A), ("G", qp.G)):
        M = M.tocoo()
        lines.append(f"{name} {M.nnz}")
        lines.extend(f"{i} {j} {v!r}" for i, j, v in zip(M.row, M.col, M.data.tolist()))
    for name, v in (("q", qp.q), ("b", qp.b), ("h", qp.h)):
        lines.append(f"{name} {v.size}")
        lines.extend(repr(float(x)) for x in v)
    Path(path).write_text("\n".join(lines) + "\n")


def load_qp(path) -> QuadraticProgram:
    it = iter(Path(path).read_text().splitlines())
    if next(it).split() != ["regeq-qp", "1"]:
        raise ValueError("not a regeq-qp v1 file")
    _, nx, me, mi = next(it).split()
    nx, me, mi = int(nx), int(me), int(mi)
    constant = float(next(it).split()[1])
    mats = {}
    for name, rows in (("P", nx), ("A", me), ("G", mi)):
        tag, nnz = next(it).split()
        assert tag == name
        trip = [next(it).split() for _ in range(int(nnz))]
        r = [int(t[0]) for t in trip]
        c = [int(t[1]) for t in trip]
        v = [float(t[2]) for t in trip]
        mats[name] = sp.csc_matrix((v, (r, c)), shape=(rows, nx))
    vecs = {}
    for name in ("q", "b", "h"):
        tag, size = next(it).split()
        assert tag == name
        vecs[name] = np.array([float(next(it)) for _ in range(int(size))])
    return QuadraticProgram(mats["P"], vecs["q"], mats["A"], vecs["b"], mats["G"],
                            vecs["h"], constant)
