"""Command-line interface: ``regeq <verb> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 infeasible
instance, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .admm import StepSchedule, StopRule, admm_solve
from .equilibrium import GameConfig, solve_equilibrium
from .errors import Infeasible, MaxIterReached, NegativeDual, RegeqError, SolverFailure
from .evaluation import BASELINE, oracle_run, regime_metrics, regime_run
from .experiment import _csv, _g, load_config, read_weights, run_experiment, \
    weights_csv
from .features import KernelConfig, fit_baseline
from .io import atomic_write, bundled_case, load_case, load_dataset
from .market import clear_two_stage, to_bus
from .qp import QPSettings
from .synth import synth_wind

log = logging.getLogger("regeq")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 2, 3, 4


def exit_code(exc: BaseException) -> int:
    """Map an error to its exit code; anything else is a configuration error."""
    if isinstance(exc, Infeasible):
        return EXIT_INFEASIBLE
    if isinstance(exc, (SolverFailure, NegativeDual, MaxIterReached)):
        return EXIT_SOLVER
    return EXIT_CONFIG


def _case_path(text: str) -> Path:
    p = Path(text)
    return p if p.exists() or p.suffix else bundled_case(text)


def _kernels(args) -> KernelConfig:
    if getattr(args, "kernels", None):
        return KernelConfig.from_dict(json.loads(Path(args.kernels).read_text()))
    return KernelConfig.default()


def _settings(args) -> QPSettings:
    return QPSettings(tol=args.tol, backend=args.backend)


def _load(args):
    case = load_case(_case_path(args.case))
    kc = _kernels(args)
    data = load_dataset(args.dataset, kc, case.wind_cap)
    return case, kc, data


# --------------------------------------------------------------------------
# verbs


def cmd_synth(args) -> int:
    text = synth_wind(args.seed, args.n, args.farms, args.capacity)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        atomic_write(args.out, text)
    return EXIT_OK


def cmd_clear(args) -> int:
    case, kc, data = _load(args)
    wind = data.wind_mw(case.wind_cap)
    if args.weights:
        theta = read_weights(args.weights, args.regime)
        forecast = (data.features @ theta.T) * case.wind_cap
    else:
        forecast = wind
    clr = clear_two_stage(case, to_bus(case, forecast), to_bus(case, wind), _settings(args),
                          ids=data.ids)
    buses = case.bus_ids
    header = ["sample_id", "cost_da", "cost_rt", "cost_total",
              *(f"lmp_da_{b}" for b in buses), *(f"lmp_rt_{b}" for b in buses)]
    rows = [[int(clr.ids[i]), _g(clr.cost_da[i]), _g(clr.cost_rt[i]), _g(clr.cost_total[i]),
             *map(_g, clr.lmp_da[i]), *map(_g, clr.lmp_rt[i])] for i in range(data.n)]
    atomic_write(args.out, _csv(header, rows))
    return EXIT_OK


def cmd_fit(args) -> int:
    case, kc, data = _load(args)
    theta = np.array([fit_baseline(data.farm(j), args.tau, _settings(args)).theta
                      for j in range(case.n_farm)])
    atomic_write(args.out, weights_csv("", {BASELINE: theta}, case, kc))
    return EXIT_OK


def cmd_equilibrium(args) -> int:
    case, kc, data = _load(args)
    cfg = GameConfig(args.gamma, args.tau, _settings(args))
    out = Path(args.out)
    if args.method == "central":
        sol = solve_equilibrium(case, data, cfg)
    else:
        schedule = StepSchedule.published() if args.schedule == "published" else \
            StepSchedule.geometric(args.rho, args.factor, args.every, args.floor)
        res = admm_solve(case, data, cfg, schedule,
                         StopRule(args.stop_tol, args.window, args.max_iter), prox=args.prox)
        sol = res.solution
        atomic_write(out / "admm_trace.csv", res.trace_csv())
    regime = f"equilibrium-{args.method}"
    atomic_write(out / "weights.csv", weights_csv("", {regime: sol.theta.theta}, case, kc))
    buses = case.bus_ids
    header = ["sample_id", *(f"lmp_da_{b}" for b in buses), *(f"lmp_rt_{b}" for b in buses)]
    rows = [[int(data.ids[i]), *map(_g, sol.prices.lmp_da[i]), *map(_g, sol.prices.lmp_rt[i])]
            for i in range(data.n)]
    atomic_write(out / "prices.csv", _csv(header, rows))
    print(f"objective {sol.objective:.10g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    case, kc, data = _load(args)
    settings = _settings(args)
    theta = read_weights(args.weights, args.regime)
    oracle = oracle_run(case, data, settings)
    m = regime_metrics(regime_run(case, data, theta, args.regime or "regime", settings,
                                  args.clip), oracle, "all")
    c = m.costs
    header = ["regime", "rmse_mwh", "cost_total", "cost_da", "cost_rt", "cost_err_avg",
              "cost_err_signed", "cost_err_cvar10",
              *(f"cr_farm{j + 1}" for j in range(case.n_farm))]
    row = [m.regime, *map(_g, (m.rmse, c.cost_total, c.cost_da, c.cost_rt, c.cost_err_avg,
                               c.cost_err_signed, c.cost_err_cvar10)), *map(_g, m.farm_cr)]
    text = _csv(header, [row])
    if args.out == "-":
        sys.stdout.write(text)
    else:
        atomic_write(args.out, text)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg = replace(cfg, output=args.output)
    res = run_experiment(cfg)
    print(res.report.cost_csv(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p, dataset=True):
    p.add_argument("--case", required=True, help="case file or bundled case name")
    if dataset:
        p.add_argument("--dataset", required=True, help="dataset CSV")
        p.add_argument("--kernels", help="kernel config JSON (default: 30 Gaussian kernels)")
    p.add_argument("--backend", default="clarabel", choices=("clarabel", "osqp", "cvxopt"))
    p.add_argument("--tol", type=float, default=1e-8)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="regeq", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write synthetic wind readings")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=1500)
    p.add_argument("--farms", type=int, default=1)
    p.add_argument("--capacity", type=float, default=350.0, help="MW per farm")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("clear", help="clear both markets for every sample")
    _common(p)
    p.add_argument("--weights", help="weights CSV; omit for perfect forecasts")
    p.add_argument("--regime", help="regime to pick from the weights CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_clear)

    p = sub.add_parser("fit", help="fit baseline least-squares forecasts")
    _common(p)
    p.add_argument("--tau", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("equilibrium", help="compute the regression equilibrium")
    _common(p)
    p.add_argument("--method", choices=("central", "admm"), default="central")
    p.add_argument("--gamma", type=float, default=1e-4)
    p.add_argument("--tau", type=float, default=10.0)
    p.add_argument("--schedule", choices=("geometric", "published"), default="geometric")
    p.add_argument("--rho", type=float, default=8.0)
    p.add_argument("--factor", type=float, default=0.5)
    p.add_argument("--every", type=int, default=100)
    p.add_argument("--floor", type=float, default=1.0)
    p.add_argument("--prox", type=float, default=3.0, help="proximal weight relative to rho")
    p.add_argument("--stop-tol", type=float, default=2e-5)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=3000)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("evaluate", help="cost and revenue metrics of a weights profile")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--regime")
    p.add_argument("--clip", action="store_true", help="clip forecasts to [0, capacity]")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run a full experiment from a config file")
    p.add_argument("config")
    p.add_argument("--output", help="override the config's output directory")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (RegeqError, FileNotFoundError) as exc:
        code = exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
