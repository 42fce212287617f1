"""Gaussian-kernel features and single-producer linear regressions.

Power is handled normalized to farm capacity (per-unit). A farm's MW
forecast is ``cap * theta @ phi``, so one kernel configuration serves all
farms and the fitted ``theta`` is in per-unit per unit feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvariantViolation, NonfiniteInput, SampleMismatch
from .qp import (QPSettings, QPSolution, QuadraticProgram, encode_l1_ball, raise_for_status,
                 solve_qp)

RAW_FEATURES = ("wind_speed", "wind_direction", "pitch_angle")


@dataclass(frozen=True)
class KernelSpec:
    """Kernels of one raw feature: ``exp(-scale * (center - x)**2)``."""

    name: str
    centers: tuple
    scale: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        object.__setattr__(self, "centers", tuple(float(v) for v in c))
        if not self.scale > 0:
            raise InvariantViolation(f"kernel scale for {self.name!r} must be positive")
        if c.size == 0 or np.any(np.diff(c) <= 0):
            raise InvariantViolation(f"centers for {self.name!r} must be strictly increasing")


@dataclass(frozen=True)
class KernelConfig:
    kernels: tuple

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        names = [k.name for k in self.kernels]
        if len(set(names)) != len(names):
            raise InvariantViolation("raw feature names must be unique")

    @property
    def names(self) -> list:
        return [k.name for k in self.kernels]

    @property
    def dim(self) -> int:
        return sum(len(k.centers) for k in self.kernels)

    @classmethod
    def default(cls, pitch_range=(0.0, 30.0), count: int = 10) -> "KernelConfig":
        """Ten kernels per raw feature.

        Speed centers 2..11 m/s (scale 0.3), direction centers evenly on
        [0, 360) deg (scale 0.03), pitch centers evenly over ``pitch_range``
        deg (scale 0.7).
        """
        lo, hi = pitch_range
        return cls((
            KernelSpec("wind_speed", tuple(np.arange(2.0, 2.0 + count)), 0.3),
            KernelSpec("wind_direction", tuple(np.arange(count) * 360.0 / count), 0.03),
            KernelSpec("pitch_angle", tuple(np.linspace(lo, hi, count)), 0.7),
        ))

    def to_dict(self) -> dict:
        return {"kernels": [{"name": k.name, "centers": list(k.centers), "scale": k.scale}
                            for k in self.kernels]}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelConfig":
        return cls(tuple(KernelSpec(k["name"], tuple(k["centers"]), float(k["scale"]))
                         for k in data["kernels"]))


@dataclass(frozen=True)
class RawRecord:
    timestamp: str
    power: tuple  # per-unit, one entry per farm
    values: dict  # raw feature name -> value

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.power, dtype=float))
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InvariantViolation("power must be finite and nonnegative")
        object.__setattr__(self, "power", tuple(p))


def feature_matrix(raw, config: KernelConfig) -> np.ndarray:
    """Vectorized kernel transform of raw values (n, n_raw) in config order."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if raw.shape[1] != len(config.kernels):
        raise DimensionMismatch(f"expected {len(config.kernels)} raw features, got {raw.shape[1]}")
    if not np.all(np.isfinite(raw)):
        raise NonfiniteInput("raw feature values must be finite")
    blocks = [np.exp(-k.scale * (np.asarray(k.centers)[None, :] - raw[:, [f]]) ** 2)
              for f, k in enumerate(config.kernels)]
    return np.hstack(blocks)


def gaussian_features(record: RawRecord, config: KernelConfig) -> np.ndarray:
    row = [record.values[name] for name in config.names]
    return feature_matrix([row], config)[0]


def predict(theta, phi) -> float | np.ndarray:
    """Linear forecast ``theta @ phi``; no clipping is applied."""
    theta, phi = np.asarray(theta, dtype=float), np.asarray(phi, dtype=float)
    if theta.shape[-1] != phi.shape[-1]:
        raise DimensionMismatch("theta and phi lengths differ")
    return phi @ theta


@dataclass(frozen=True)
class Dataset:
    """Samples of features (n, k) and per-unit farm power (n, b)."""

    features: np.ndarray
    power: np.ndarray
    ids: np.ndarray = None
    timestamps: tuple = field(default=(), repr=False)

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=float))
        p = np.asarray(self.power, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if f.shape[0] != p.shape[0]:
            raise DimensionMismatch("features and power disagree on sample count")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(p))):
            raise NonfiniteInput("dataset contains non-finite values")
        ids = np.arange(f.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=int)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "power", p)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_farm(self) -> int:
        return self.power.shape[1]

    def wind_mw(self, cap) -> np.ndarray:
        cap = np.asarray(cap, dtype=float)
        if cap.shape not in ((self.n_farm,), ()):
            raise DimensionMismatch("capacity vector does not match farm count")
        return self.power * cap

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        ts = tuple(self.timestamps[i] for i in idx) if self.timestamps else ()
        return Dataset(self.features[idx], self.power[idx], self.ids[idx], ts)

    def farm(self, j: int) -> "Dataset":
        return Dataset(self.features, self.power[:, [j]], self.ids, self.timestamps)

    def split(self, n_train: int, n_test: int | None = None, seed: int = 0):
        """Seeded random split into disjoint train and test subsets."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(self.n)
        n_test = self.n - n_train if n_test is None else n_test
        if n_train + n_test > self.n:
            raise SampleMismatch(f"requested {n_train}+{n_test} samples, dataset has {self.n}")
        return self.subset(np.sort(order[:n_train])), self.subset(np.sort(order[n_train:n_train + n_test]))


@dataclass(eq=False)
class FitResult:
    theta: np.ndarray
    loss: float
    solution: QPSolution = field(repr=False, default=None)
    qp: QuadraticProgram = field(repr=False, default=None)
    nonunique: bool = False


def _l1_regression_qp(Phi, y, tau, weight, lin):
    """min weight/n |Phi theta - y|^2 - lin' theta over |theta|_1 <= tau.

    Variables are (theta, t); the constant term keeps the objective equal to
    the weighted loss minus the linear reward.
    """
    n, k = Phi.shape
    blk = encode_l1_ball(k, tau)
    P = sp.block_diag([2.0 * weight / n * (Phi.T @ Phi), sp.csc_matrix((k, k))], format="csc")
    q = np.concatenate([-2.0 * weight / n * (Phi.T @ y) - lin, np.zeros(k)])
    const = weight / n * float(y @ y)
    return QuadraticProgram(P, q, None, None, blk.matrix, blk.rhs, constant=const,
                            index={"theta": np.arange(k), "t": np.arange(k, 2 * k)})


def _single_farm(dataset: Dataset):
    if dataset.n_farm != 1:
        raise DimensionMismatch("expected a single-farm dataset; use Dataset.farm(j)")
    return dataset.features, dataset.power[:, 0]


def fit_baseline(dataset: Dataset, tau: float, settings: QPSettings | None = None) -> FitResult:
    """Least-squares fit ``min (1/n) sum (theta'phi - w)^2`` over the l1 ball."""
    Phi, y = _single_farm(dataset)
    qp = _l1_regression_qp(Phi, y, tau, 1.0, np.zeros(Phi.shape[1]))
    sol = solve_qp(qp, settings or QPSettings())
    if not sol.optimal:
        raise_for_status(sol.status, "baseline regression")
    theta = sol.x[: Phi.shape[1]].copy()
    return FitResult(theta, float(np.mean((Phi @ theta - y) ** 2)), sol, qp)


def fit_price_taker(dataset: Dataset, lmp_da, lmp_rt, gamma: float, tau: float,
                    scale: float = 1.0, settings: QPSettings | None = None) -> FitResult:
    """Revenue-seeking fit against a fixed price history.

    Maximizes ``(1/n) sum [lmp_da*f + lmp_rt*(w - f)] - gamma*(1/n) sum (f - w)^2``
    with MW forecast ``f = scale * theta'phi`` and ``w = scale * power``.
    With ``gamma = 0`` the problem is a linear program over the l1 ball and
    ``nonunique`` flags ties in the vertex choice.
    """
    Phi, y = _single_farm(dataset)
    lmp_da = np.asarray(lmp_da, dtype=float).ravel()
    lmp_rt = np.asarray(lmp_rt, dtype=float).ravel()
    if lmp_da.size != dataset.n or lmp_rt.size != dataset.n:
        raise SampleMismatch("price history length differs from sample count")
    if gamma < 0:
        raise InvariantViolation("gamma must be nonnegative")
    n, k = Phi.shape
    lin = scale * ((lmp_da - lmp_rt) @ Phi) / n
    qp = _l1_regression_qp(scale * Phi, scale * y, tau, gamma, lin)
    sol = solve_qp(qp, settings or QPSettings())
    if not sol.optimal:
        raise_for_status(sol.status, "price-taking regression")
    theta = sol.x[:k].copy()
    nonunique = False
    if gamma == 0:
        a = np.sort(np.abs(lin))[::-1]
        nonunique = bool(a[0] <= 1e-12 or (k > 1 and a[0] - a[1] <= 1e-12 * a[0]))
    loss = float(np.mean((scale * (Phi @ theta - y)) ** 2))
    return FitResult(theta, loss, sol, qp, nonunique)
