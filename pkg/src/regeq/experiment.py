"""Experiment configuration and the end-to-end benchmark run.

A run writes into its output directory:

``dataset.csv``      synthetic readings (only when generated)
``costs.csv``        forecast errors, dispatch costs and cost errors
``revenue.csv``      producer revenues, competitive ratios, deviation incentives
``weights.csv``      fitted regression weights per regime, farm and kernel
``curves.csv``       test-split forecasts against wind speed
``admm_trace.csv``   ADMM iteration trace (ADMM regime only)
``manifest.json``    config, config hash, seeds, versions, timings, stages

Every CSV carries the config hash in its first column. The hash covers the
whole config except the output directory, so two runs of one config into
different directories produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from .admm import StepSchedule, StopRule, admm_solve
from .equilibrium import GameConfig, solve_equilibrium, solve_fixed_profile, verify_equilibrium
from .errors import SchemaError
from .evaluation import (BASELINE, ORACLE, MetricsReport, oracle_run, regime_metrics,
                         regime_run)
from .features import KernelConfig, fit_baseline
from .io import atomic_write, load_case, load_dataset, read_wind_csv
from .qp import QPSettings
from .synth import synth_wind

REGIMES = (ORACLE, BASELINE, "equilibrium-central", "equilibrium-admm")
MANIFEST_SCHEMA = "regeq-manifest/1"


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic data request; ``farm_count`` 1 shares one series among all farms."""

    seed: int = 0
    farm_count: int = 1


@dataclass(frozen=True)
class AdmmSpec:
    schedule: StepSchedule = field(
        default_factory=lambda: StepSchedule.geometric(8.0, 0.5, every=100, floor=1.0))
    stop: StopRule = field(default_factory=lambda: StopRule(tol=2e-5, window=5, max_iter=3000))
    prox: float = 3.0


@dataclass(frozen=True)
class ExperimentConfig:
    case: str
    output: str = "results"
    dataset: str | None = None
    synth: SynthSpec | None = None
    n_train: int = 500
    n_test: int = 1000
    split_seed: int = 0
    kernels: KernelConfig = field(default_factory=KernelConfig.default)
    gamma: object = 1e-4
    tau: object = 10.0
    settings: QPSettings = field(default_factory=QPSettings)
    admm: AdmmSpec = field(default_factory=AdmmSpec)
    regimes: tuple = (ORACLE, BASELINE, "equilibrium-central")
    deviation_splits: tuple = ("train",)
    clip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(self.regimes))
        object.__setattr__(self, "deviation_splits", tuple(self.deviation_splits))
        bad = [r for r in self.regimes if r not in REGIMES]
        if bad:
            raise SchemaError(f"regimes: unknown regime(s) {bad}; choose from {list(REGIMES)}")
        if any(s not in ("train", "test") for s in self.deviation_splits):
            raise SchemaError("deviation_splits: entries must be 'train' or 'test'")
        if (self.dataset is None) == (self.synth is None):
            raise SchemaError("give exactly one of dataset or synth")
        if self.n_train < 10 * self.kernels.dim:
            raise SchemaError(f"n_train={self.n_train} is below 10x the feature dimension "
                              f"({self.kernels.dim})")
        if self.n_test < 1:
            raise SchemaError("n_test must be positive")

    @property
    def game(self) -> GameConfig:
        return GameConfig(self.gamma, self.tau, self.settings)

    def check_paths(self) -> None:
        for label, p in (("case", self.case), ("dataset", self.dataset)):
            if p is not None and not Path(p).exists():
                raise SchemaError(f"{label}: file {p!r} does not exist")

    def to_dict(self) -> dict:
        tolist = lambda v: np.asarray(v, dtype=float).tolist()
        return {
            "case": self.case, "output": self.output, "dataset": self.dataset,
            "synth": None if self.synth is None else asdict(self.synth),
            "n_train": self.n_train, "n_test": self.n_test, "split_seed": self.split_seed,
            "kernels": self.kernels.to_dict(), "gamma": tolist(self.gamma),
            "tau": tolist(self.tau), "settings": asdict(self.settings),
            "admm": {"schedule": self.admm.schedule.to_dict(), "stop": asdict(self.admm.stop),
                     "prox": self.admm.prox},
            "regimes": list(self.regimes), "deviation_splits": list(self.deviation_splits),
            "clip": self.clip,
        }

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "ExperimentConfig":
        """Build a config; relative paths, output included, resolve against ``base``."""
        if not isinstance(data, dict) or "case" not in data:
            raise SchemaError("config: 'case' is required")
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise SchemaError(f"config: unknown field(s) {sorted(extra)}")
        kw = dict(data)
        resolve = lambda p: p if p is None or base is None or Path(p).is_absolute() \
            else str(base / p)
        try:
            kw["case"] = resolve(kw["case"])
            kw["dataset"] = resolve(kw.get("dataset"))
            kw["output"] = resolve(kw.get("output", "results"))
            if kw.get("synth") is not None:
                kw["synth"] = SynthSpec(**kw["synth"])
            if "kernels" in kw:
                kw["kernels"] = KernelConfig.from_dict(kw["kernels"])
            if "settings" in kw:
                kw["settings"] = QPSettings(**kw["settings"])
            if "admm" in kw:
                a = kw["admm"]
                kw["admm"] = AdmmSpec(StepSchedule.from_dict(a["schedule"]),
                                      StopRule(**a.get("stop", {})), float(a.get("prox", 3.0)))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"config: malformed field ({exc})") from exc
        return cls(**kw)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return ExperimentConfig.from_dict(data, path.parent)


# --------------------------------------------------------------------------
# tables


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _g(v) -> str:
    return f"{float(v):.10g}"


def weights_csv(h: str, profiles: dict, case, kernels: KernelConfig) -> str:
    labels = [(k.name, c) for k in kernels.kernels for c in k.centers]
    rows = []
    for regime, theta in profiles.items():
        for j in range(theta.shape[0]):
            for i, (name, center) in enumerate(labels):
                rows.append([h, regime, j + 1, case.bus_ids[case.wind_bus[j]], name,
                             _g(center), _g(theta[j, i])])
    return _csv(["config_hash", "regime", "farm", "bus", "feature", "center", "weight"], rows)


def curves_csv(h: str, runs: dict, speed) -> str:
    names = list(runs)
    first = runs[names[0]]
    b = first.wind.shape[1]
    rows = []
    for i, sid in enumerate(first.ids):
        for j in range(b):
            rows.append([h, int(sid), j + 1, _g(speed[i]), _g(first.wind[i, j]),
                         *(_g(runs[r].forecast[i, j]) for r in names)])
    return _csv(["config_hash", "sample_id", "farm", "wind_speed", "actual_mw",
                 *(f"{r}_mw" for r in names)], rows)


def read_weights(path, regime: str | None = None) -> np.ndarray:
    """Profile (n_farm, k) from a weights table, optionally filtering one regime."""
    rows = list(csv.DictReader(open(path, newline="")))
    if regime is not None:
        rows = [r for r in rows if r["regime"] == regime]
    if not rows:
        raise SchemaError(f"{path}: no weights" + (f" for regime {regime!r}" if regime else ""))
    if len({r["regime"] for r in rows}) > 1:
        raise SchemaError(f"{path}: several regimes present; pick one")
    farms = sorted({int(r["farm"]) for r in rows})
    out = [[float(r["weight"]) for r in rows if int(r["farm"]) == j] for j in farms]
    if len({len(v) for v in out}) != 1:
        raise SchemaError(f"{path}: farms have different weight counts")
    return np.asarray(out)


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("regeq", "numpy", "scipy", "clarabel", "osqp", "cvxopt"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# --------------------------------------------------------------------------
# run


@dataclass(eq=False)
class ExperimentResult:
    report: MetricsReport
    profiles: dict
    manifest: dict
    outputs: dict
    admm: object = None
    runs: dict = field(default_factory=dict)  # (regime, split) -> RegimeRun
    solutions: dict = field(default_factory=dict)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute the requested regimes and write the result bundle.

    Stage failures are recorded in the manifest, which is written before the
    exception propagates.
    """
    config.check_paths()
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    h = config.config_hash()
    manifest = {"schema": MANIFEST_SCHEMA, "config_hash": h, "config": config.to_dict(),
                "seeds": {"split": config.split_seed,
                          "synth": None if config.synth is None else config.synth.seed},
                "versions": _versions(),
                "started": datetime.now(timezone.utc).isoformat(), "stages": [],
                "outputs": {}}
    written, state = {}, {}

    def stage(name, fn):
        t0 = time.perf_counter()
        entry = {"stage": name, "status": "ok"}
        try:
            return fn()
        except Exception as exc:
            entry["status"] = "failed"
            entry["error"] = f"{type(exc).__name__}: {exc}"
            raise
        finally:
            entry["seconds"] = round(time.perf_counter() - t0, 3)
            manifest["stages"].append(entry)

    def write(name, text):
        atomic_write(out / name, text)
        written[name] = hashlib.sha256(text.encode()).hexdigest()

    try:
        case = stage("load_case", lambda: load_case(config.case))
        data_path = config.dataset
        if config.synth is not None:
            text = synth_wind(config.synth.seed, config.n_train + config.n_test,
                              config.synth.farm_count,
                              case.wind_cap if config.synth.farm_count > 1
                              else float(case.wind_cap[0]))
            write("dataset.csv", text)
            data_path = out / "dataset.csv"
        if config.synth is not None and config.synth.farm_count == 1:
            # a shared series is scaled per farm, so it is stored per unit of farm 1
            cap = np.full(case.n_farm, float(case.wind_cap[0]))
        else:
            cap = case.wind_cap
        full = stage("load_dataset", lambda: load_dataset(data_path, config.kernels, cap))
        _, _, raw = read_wind_csv(data_path, config.kernels)
        train, test = full.split(config.n_train, config.n_test, config.split_seed)
        splits = {"train": train, "test": test}
        cfg = config.game
        settings = config.settings
        b = case.n_farm

        oracle = {s: stage(f"oracle_{s}", lambda d=d: oracle_run(case, d, settings))
                  for s, d in splits.items()}
        profiles, solutions = {}, {}
        if BASELINE in config.regimes:
            profiles[BASELINE] = stage("fit_baseline", lambda: np.array(
                [fit_baseline(train.farm(j), float(cfg.taus(b)[j]), settings).theta
                 for j in range(b)]))
        if "equilibrium-central" in config.regimes:
            sol = stage("equilibrium_central", lambda: solve_equilibrium(case, train, cfg))
            profiles["equilibrium-central"] = np.array(sol.theta.theta)
            solutions["equilibrium-central"] = sol
        admm_result = None
        if "equilibrium-admm" in config.regimes:
            admm_result = stage("equilibrium_admm", lambda: admm_solve(
                case, train, cfg, config.admm.schedule, config.admm.stop,
                prox=config.admm.prox))
            profiles["equilibrium-admm"] = np.array(admm_result.solution.theta.theta)
            write("admm_trace.csv", admm_result.trace_csv())

        report = MetricsReport(farm_labels=[f"farm@bus{case.bus_ids[k]}" for k in case.wind_bus],
                               config_hash=h)
        test_runs, runs = {}, {}
        for split, d in splits.items():
            runs[(ORACLE, split)] = oracle[split]
            if ORACLE in config.regimes:
                report.rows.append(regime_metrics(oracle[split], oracle[split], split))
            for regime, theta in profiles.items():
                run = stage(f"clear_{regime}_{split}", lambda d=d, theta=theta, regime=regime:
                            regime_run(case, d, theta, regime, settings, config.clip))
                delta = None
                if split in config.deviation_splits:
                    delta = stage(f"deviation_{regime}_{split}", lambda d=d, theta=theta,
                                  regime=regime, split=split: _deviation(
                                      case, d, cfg, theta, solutions.get(regime)
                                      if split == "train" else None))
                report.rows.append(regime_metrics(run, oracle[split], split, delta))
                runs[(regime, split)] = run
                if split == "test":
                    test_runs[regime] = run
        write("costs.csv", report.cost_csv())
        write("revenue.csv", report.revenue_csv())
        if profiles:
            write("weights.csv", weights_csv(h, profiles, case, config.kernels))
        if test_runs:
            sid = {int(v): i for i, v in enumerate(full.ids)}
            speed = raw[[sid[int(i)] for i in test.ids], config.kernels.names.index(
                "wind_speed")] if "wind_speed" in config.kernels.names else \
                np.full(test.n, np.nan)
            write("curves.csv", curves_csv(h, test_runs, speed))
        state["ok"] = True
        return ExperimentResult(report, profiles, manifest, {k: out / k for k in written},
                                admm_result, runs, solutions)
    finally:
        manifest["finished"] = datetime.now(timezone.utc).isoformat()
        manifest["status"] = "ok" if state.get("ok") else "failed"
        manifest["outputs"] = written
        atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _deviation(case, dataset, cfg, theta, sol=None) -> np.ndarray:
    """ΔR of every farm at profile ``theta`` on ``dataset``."""
    if sol is None:
        sol = solve_fixed_profile(case, dataset, cfg, theta)
    return verify_equilibrium(sol, case, dataset, cfg).gain
