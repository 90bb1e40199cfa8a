"""Command-line front end.

Exit codes: 0 success, 1 solver or numerical failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .certificates import (RiskBoundQuery, TestSizeQuery, certify_solution, epsilon_bounds,
                           required_test_samples)
from .exceptions import NonTerminationError, NumericalError, ParameterError, SolverLimitError
from .plantmodel import (condense, draw_scenarios, load_config, read_scenarios_csv, scenario_header)
from .sempc import CertifyOptions, SempcProblem, closed_loop, solve_sempc, steady_input
from .support import SupportConfig, discover_support


class UsageError(Exception):
    pass


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_out(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    raise TypeError(f"not JSON serializable: {type(value)}")


def _cap(value) -> float:
    if value is None:
        return math.inf
    return float(value)


def _load(args):
    try:
        return load_config(args.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _check_common(args) -> None:
    if args.N < 1:
        raise UsageError("--N must be >= 1")
    if args.Ns < 1:
        raise UsageError("--Ns must be >= 1")
    if hasattr(args, "k") and not 1 <= args.k <= args.Ns:
        raise UsageError("--k must lie in [1, Ns]")
    cap = getattr(args, "ees_cap", None)
    if cap is not None and not cap > 0:
        raise UsageError("--ees-cap must be positive")


def _scenarios(args, cfg):
    if getattr(args, "scenarios", None):
        if not Path(args.scenarios).is_file():
            raise UsageError(f"scenario file not found: {args.scenarios}")
        S, N, m = read_scenarios_csv(args.scenarios)
        if N != args.N or m != cfg.system.m:
            raise UsageError(f"scenario file is {N}x{m}, expected {args.N}x{cfg.system.m}")
        return S
    rng = np.random.default_rng([args.seed, 0, 0])
    return draw_scenarios(cfg.tariff, args.N, cfg.system.m, args.Ns, rng=rng,
                          start_hour=args.start_hour)


# ---------------------------------------------------------------------------
# subcommands

def cmd_certify(args) -> int:
    try:
        q = RiskBoundQuery(args.m, args.k, args.beta)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    cert = epsilon_bounds(q)
    out = cert.as_dict()
    out.pop("scope")
    _json_out(out)
    return 0


def cmd_testsize(args) -> int:
    try:
        q = TestSizeQuery(args.mu, args.rho, args.beta_bar)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    print(required_test_samples(q))
    return 0


def _support_config(args) -> SupportConfig:
    N_T = args.NT
    try:
        if N_T is None:
            N_T = required_test_samples(TestSizeQuery(args.mu, args.rho, args.beta_bar))
        return SupportConfig(args.Nr, N_T, args.k, args.mu, args.rho, args.max_rounds, args.seed)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None


def cmd_support(args) -> int:
    cfg = _load(args)
    _check_common(args)
    scfg = _support_config(args)
    S = _scenarios(args, cfg)
    demands = cfg.demand.demands(args.start_hour, args.N)
    P = condense(cfg.system, cfg.cons, cfg.x0, demands, args.N)
    box = (P.u_lo, P.u_hi)
    report = discover_support(S, scfg, None if args.box_only else P, u_box=box)
    out = report.as_dict()
    s_cert = out["s_P"] if out["s_P"] is not None else out["s_box"]
    cert = certify_solution(s_cert, S.shape[0], args.beta)
    out.update({"N_s": int(S.shape[0]), "k": args.k, "beta": args.beta,
                "eps_lo": cert.eps_lo, "eps_hi": cert.eps_hi, "N_T": scfg.N_T})
    _json_out(out)
    return 0


def cmd_solve(args) -> int:
    cfg = _load(args)
    _check_common(args)
    S = _scenarios(args, cfg)
    demands = cfg.demand.demands(args.start_hour, args.N)
    u_prev = steady_input(cfg.system, cfg.cons, cfg.demand.d_bar)
    problem = SempcProblem(cfg.system, cfg.cons, S, args.N, demands, cfg.x0, u_prev, k=args.k,
                           M=_cap(args.ees_cap), R=cfg.R, terminal_weight=cfg.terminal_weight)
    sol = solve_sempc(problem)
    out = {"status": sol.status, "N_s": int(S.shape[0]), "k": args.k,
           "M": None if args.ees_cap is None else args.ees_cap}
    if sol.status == "optimal":
        out.update({
            "objective": sol.objective, "avg_energy": sol.avg_energy, "ees_value": sol.ees_value,
            "ees_bound": sol.ees_bound, "t_bar": sol.t_bar,
            "u_tilde": sol.u_tilde.reshape(args.N, -1), "x_traj": sol.x_traj,
            "top_k": sol.top_k,
        })
    _json_out(out)
    return 0 if sol.status == "optimal" else 1


def _certify_options(args):
    if not args.certify:
        return None
    N_T = args.NT
    try:
        if N_T is None:
            N_T = required_test_samples(TestSizeQuery(args.mu, args.rho, args.beta_bar))
        RiskBoundQuery(args.Ns, 0, args.beta)
        SupportConfig(args.Nr, N_T, args.k, args.mu, args.rho, args.max_rounds, args.seed)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    return CertifyOptions(args.beta, args.Nr, N_T, args.mu, args.rho, args.max_rounds)


def _plot_csv(cfg, capped, uncapped, M, start_hour) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n, m = cfg.system.n, cfg.system.m
    writer.writerow(["t", "hour", "base_price", "demand_multiplier"]
                    + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)]
                    + ["objective_capped", "ees_capped", "objective_uncapped", "ees_uncapped", "M"])
    base = cfg.tariff.deterministic
    mult = cfg.demand.multiplier

    def f(v):
        return "" if v is None else f"{float(v):.12g}"

    for rc, ru in zip(capped.records, uncapped.records):
        hour = start_hour + rc.t
        writer.writerow([rc.t, hour % 24, f(base[hour % 24]), f(mult[hour % cfg.demand.period])]
                        + [f(v) for v in rc.x] + [f(v) for v in rc.u_applied]
                        + [f(rc.objective), f(rc.ees_value), f(ru.objective), f(ru.ees_value),
                           "" if math.isinf(M) else f(M)])
    return buf.getvalue()


def cmd_run(args) -> int:
    cfg = _load(args)
    _check_common(args)
    if args.T < 0:
        raise UsageError("--T must be >= 0")
    certify = _certify_options(args)
    M = _cap(args.ees_cap)
    trace = closed_loop(cfg, args.N, args.Ns, args.k, M, args.T, seed=args.seed,
                        start_hour=args.start_hour, certify=certify,
                        shadow_uncapped=args.shadow_uncapped)
    out = Path(args.out)
    meta_path = Path(args.meta) if args.meta else out.with_suffix(".json")
    plot = None
    if args.plot_data:
        free = trace if math.isinf(M) else closed_loop(
            cfg, args.N, args.Ns, args.k, math.inf, args.T, seed=args.seed,
            start_hour=args.start_hour)
        plot = _plot_csv(cfg, trace, free, M, args.start_hour)
    meta = dict(trace.metadata)
    meta["config"] = str(args.config)
    meta["statuses"] = {s: sum(r.status == s for r in trace.records)
                        for s in sorted({r.status for r in trace.records})}
    meta["softened_steps"] = [r.t for r in trace.records if r.softened]
    _atomic_write(out, trace.to_csv())
    _atomic_write(meta_path, json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    if plot is not None:
        _atomic_write(args.plot_data, plot)
    bad = [r.t for r in trace.records if r.status != "optimal"]
    if bad:
        print(f"warning: {len(bad)} step(s) without an optimal solution: {bad}", file=sys.stderr)
    return 0


def cmd_gen_scenarios(args) -> int:
    cfg = _load(args)
    _check_common(args)
    S = _scenarios(args, cfg)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(scenario_header(args.N, cfg.system.m))
    writer.writerows([[f"{x:.12g}" for x in row] for row in S])
    _atomic_write(args.out, buf.getvalue())
    return 0


# ---------------------------------------------------------------------------

def _add_problem_args(p, with_k=True):
    p.add_argument("--config", required=True,
                   help="network config JSON path or bundled name (one_tank, three_tank, richmond_like)")
    p.add_argument("--N", type=int, default=30, help="prediction horizon in hours")
    p.add_argument("--Ns", type=int, default=2000, help="number of price scenarios")
    if with_k:
        p.add_argument("--k", type=int, default=2, help="tail size of the EES")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-hour", type=int, default=0)


def _add_support_args(p):
    p.add_argument("--mu", type=float, default=1e-3)
    p.add_argument("--rho", type=float, default=None, help="defaults to mu/2")
    p.add_argument("--beta-bar", type=float, default=1e-5)
    p.add_argument("--Nr", type=int, default=3000)
    p.add_argument("--NT", type=int, default=None, help="test samples per round; computed if omitted")
    p.add_argument("--max-rounds", type=int, default=1000)
    p.add_argument("--beta", type=float, default=1e-6)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eesmpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="risk bounds for a support count")
    p.add_argument("--m", type=int, required=True, help="number of scenarios")
    p.add_argument("--k", type=int, required=True, help="number of support elements")
    p.add_argument("--beta", type=float, default=1e-6)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("testsize", help="test samples per round for given mu, rho, beta-bar")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--beta-bar", type=float, required=True)
    p.set_defaults(func=cmd_testsize)

    p = sub.add_parser("support", help="support discovery over the box and the feasible set")
    _add_problem_args(p)
    _add_support_args(p)
    p.add_argument("--scenarios", help="scenario CSV (otherwise drawn from the tariff)")
    p.add_argument("--box-only", action="store_true", help="skip the feasible-set filter")
    p.set_defaults(func=cmd_support)

    p = sub.add_parser("solve", help="solve one scenario MPC problem")
    _add_problem_args(p)
    p.add_argument("--ees-cap", type=float, default=None, help="EES cap M (omit for none)")
    p.add_argument("--scenarios", help="scenario CSV (otherwise drawn from the tariff)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("run", help="closed-loop receding-horizon simulation")
    _add_problem_args(p)
    _add_support_args(p)
    p.add_argument("--ees-cap", type=float, default=None, help="EES cap M (omit for none)")
    p.add_argument("--T", type=int, default=48, help="number of closed-loop steps")
    p.add_argument("--out", required=True, help="trace CSV path")
    p.add_argument("--meta", help="metadata JSON path (default: trace path with .json)")
    p.add_argument("--certify", action="store_true", help="certify the solution at every step")
    p.add_argument("--shadow-uncapped", action="store_true",
                   help="also solve the uncapped problem from each visited state")
    p.add_argument("--plot-data", help="write plot series CSV (runs the uncapped loop as well)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-scenarios", help="draw price scenarios to CSV")
    _add_problem_args(p, with_k=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenarios)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "rho", "unset") is None:
        args.rho = args.mu / 2.0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, SolverLimitError, NonTerminationError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
