"""Scenario economic MPC with an empirical expected shortfall cap.

The decision vector is ``[u (N*m), lam (N_s), t]``. The cap on the average
of the ``k`` largest scenario costs is imposed through

    lam_j >= alpha_j @ u - t,  lam_j >= 0,  t + sum(lam) / k <= M,

which is exact because the left side of the last row is minimized at the
k-largest sum. With ``M = inf`` the cap rows and the auxiliary variables are
dropped and ``(t, lam)`` are reported at their closed-form minimizer.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .certificates import certify_solution
from .exceptions import DimensionError, ParameterError
from .optim import CHECK_TOL, ConicProgram, SocBlock, solve_conic
from .plantmodel import (ConstraintSets, FeasibleSet, LinearSystem, NetworkConfig, condense,
                         draw_scenarios, simulate)
from .riskmeasures import ees, k_largest_sum_minimizer, top_k_indices
from .support import SupportConfig, discover_support

SOFT_PENALTY = 1e6


@dataclass(frozen=True)
class SempcProblem:
    system: LinearSystem
    cons: ConstraintSets
    scenarios: np.ndarray
    N: int
    demands: np.ndarray
    x0: np.ndarray
    u_prev: np.ndarray
    k: int = 1
    M: float = math.inf
    R: np.ndarray | None = None
    terminal_weight: float = 0.0
    # exact-penalty weight for softened state rows; None keeps them hard
    soft_penalty: float | None = None

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.scenarios, dtype=float))
        n, m = self.system.n, self.system.m
        if self.N < 1:
            raise ParameterError("horizon N must be >= 1")
        if S.shape[1] != self.N * m:
            raise DimensionError(f"scenarios must have {self.N * m} columns")
        if not 1 <= self.k <= S.shape[0]:
            raise ParameterError(f"k={self.k} must lie in [1, {S.shape[0]}]")
        if not (self.M > 0 or math.isinf(self.M)):
            raise ParameterError("M must be positive or inf")
        R = np.zeros((m, m)) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape != (m, m):
            raise DimensionError("R must be m x m")
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(0.5 * (R + R.T)).min() < -1e-10:
            raise ParameterError("R must be symmetric positive semidefinite")
        if self.terminal_weight < 0:
            raise ParameterError("terminal_weight must be non-negative")
        D = np.asarray(self.demands, dtype=float).reshape(-1, self.system.v)
        if D.shape[0] < self.N:
            raise DimensionError(f"need {self.N} demand steps")
        object.__setattr__(self, "scenarios", S)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "demands", D[: self.N])
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).ravel())
        object.__setattr__(self, "u_prev", np.asarray(self.u_prev, dtype=float).ravel())
        if self.x0.size != n or self.u_prev.size != m:
            raise DimensionError("x0 or u_prev has the wrong length")

    @property
    def n_scenarios(self) -> int:
        return self.scenarios.shape[0]

    @property
    def capped(self) -> bool:
        return math.isfinite(self.M)

    def replace(self, **changes) -> "SempcProblem":
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return SempcProblem(**fields)


@dataclass
class SempcProgram:
    """Assembled conic program plus the variable layout."""

    program: ConicProgram
    feasible_set: FeasibleSet
    n_u: int
    n_lambda: int
    n_slack: int
    n_soc: int

    @property
    def n_vars(self) -> int:
        return self.program.n

    @property
    def n_constraints(self) -> int:
        p = self.program
        return p.b_ub.size + p.b_eq.size + len(p.socs)

    def split(self, x):
        u = x[: self.n_u]
        lam = x[self.n_u: self.n_u + self.n_lambda]
        t_bar = float(x[self.n_u + self.n_lambda]) if self.n_lambda else None
        slack = x[self.n_u + self.n_lambda + (1 if self.n_lambda else 0):]
        return u, lam, t_bar, slack


def _smoothness(problem: SempcProblem):
    """``sum_l (u_l - u_{l-1})' R (u_l - u_{l-1})`` as ``u'Qu + c'u + const``."""
    N, m = problem.N, problem.system.m
    D = np.eye(N * m) - np.eye(N * m, k=-m)
    Rbar = np.kron(np.eye(N), problem.R)
    e = np.zeros(N * m)
    e[:m] = problem.u_prev
    Q = D.T @ Rbar @ D
    c = -2.0 * D.T @ Rbar @ e
    return Q, c, float(e @ Rbar @ e)


def build_sempc(problem: SempcProblem) -> SempcProgram:
    """Assemble the scenario program over ``[u, lam, t, slacks]``."""
    sys, cons = problem.system, problem.cons
    P = condense(sys, cons, problem.x0, problem.demands, problem.N)
    S = problem.scenarios
    n_u = problem.N * sys.m
    n_lam = problem.n_scenarios if problem.capped else 0
    n_aux = n_lam + (1 if problem.capped else 0)
    soft = problem.soft_penalty is not None
    n_box = P.Bbar.shape[0]
    n_slack = (n_box + 1) if soft else 0
    n_var = n_u + n_aux + n_slack

    Q = np.zeros((n_var, n_var))
    c = np.zeros(n_var)
    Qs, cs, const = _smoothness(problem)
    Q[:n_u, :n_u] += Qs
    c[:n_u] += cs + S.mean(axis=0)
    if problem.terminal_weight > 0:
        w = problem.terminal_weight
        Q[:n_u, :n_u] += w * P.Bhat.T @ cons.Omega @ P.Bhat
        c[:n_u] += 2.0 * w * P.Bhat.T @ cons.Omega @ P.gamma
        const += w * float(P.gamma @ cons.Omega @ P.gamma)
    if soft:
        c[n_u + n_aux:] = problem.soft_penalty

    rows, rhs = [], []
    box = np.zeros((n_box, n_var))
    box[:, :n_u] = P.Bbar
    if soft:
        box[:, n_u + n_aux: n_u + n_aux + n_box] = -np.eye(n_box)
    rows.append(box)
    rhs.append(P.Abar)
    if problem.capped:
        t_col = n_u + n_lam
        ees_rows = np.zeros((n_lam, n_var))
        ees_rows[:, :n_u] = S
        ees_rows[:, t_col] = -1.0
        ees_rows[:, n_u:n_u + n_lam] = -np.eye(n_lam)
        cap = np.zeros((1, n_var))
        cap[0, t_col] = 1.0
        cap[0, n_u:n_u + n_lam] = 1.0 / problem.k
        rows.extend([ees_rows, cap])
        rhs.extend([np.zeros(n_lam), [problem.M]])

    F, g, radius = P.terminal_soc()
    Fx = np.zeros((F.shape[0], n_var))
    Fx[:, :n_u] = F
    h = np.zeros(n_var)
    if soft:
        # radius grows with the terminal slack
        h[-1] = 1.0
    socs = [SocBlock(Fx, g, h, radius)]

    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    lb[:n_u], ub[:n_u] = P.u_lo, P.u_hi
    lb[n_u:n_u + n_lam] = 0.0
    lb[n_u + n_aux:] = 0.0
    program = ConicProgram(c, Q=Q, A_ub=np.vstack(rows), b_ub=np.concatenate(rhs), socs=socs,
                           lb=lb, ub=ub, constant=const)
    return SempcProgram(program, P, n_u, n_lam, n_slack, len(socs))


@dataclass
class SempcSolution:
    status: str  # optimal | infeasible | solver-limit
    u_tilde: np.ndarray | None = None
    x_traj: np.ndarray | None = None
    objective: float | None = None
    avg_energy: float | None = None
    ees_value: float | None = None
    ees_bound: float | None = None
    top_k: np.ndarray | None = None
    lam: np.ndarray | None = None
    t_bar: float | None = None
    slack: float = 0.0
    solver_status: str = ""


def solve_sempc(problem: SempcProblem, time_limit: float | None = None) -> SempcSolution:
    """Solve the scenario program and evaluate the risk quantities at the optimum."""
    prog = build_sempc(problem)
    res = solve_conic(prog.program, time_limit)
    if res.status == "infeasible":
        return SempcSolution("infeasible", solver_status=res.solver_status)
    if res.status != "optimal":
        return SempcSolution("solver-limit", solver_status=res.solver_status)
    u, lam, t_bar, slack = prog.split(res.x)
    u = np.clip(u, prog.feasible_set.u_lo, prog.feasible_set.u_hi)
    losses = problem.scenarios @ u
    if problem.capped:
        bound = t_bar + float(lam.sum()) / problem.k
    else:
        t_bar, lam = k_largest_sum_minimizer(losses, problem.k)
        bound = t_bar + float(lam.sum()) / problem.k
    x_traj = simulate(problem.system, problem.x0, u.reshape(problem.N, -1), problem.demands)
    return SempcSolution(
        "optimal", u, x_traj, res.value, float(losses.mean()), ees(losses, problem.k), bound,
        top_k_indices(losses, problem.k), np.asarray(lam), float(t_bar),
        float(slack.sum()) if slack.size else 0.0, res.solver_status)


def steady_input(system: LinearSystem, cons: ConstraintSets, d_bar) -> np.ndarray:
    """Input balancing the average demand, or zeros when none fits the bounds."""
    rhs = -system.Bd @ np.asarray(d_bar, dtype=float)
    u, *_ = np.linalg.lstsq(system.Bu, rhs, rcond=None)
    ok = (np.linalg.norm(system.Bu @ u - rhs) <= 1e-9 * max(1.0, np.linalg.norm(rhs))
          and np.all(u >= cons.u_lo - 1e-12) and np.all(u <= cons.u_hi + 1e-12))
    return u if ok else np.zeros(system.m)


# ---------------------------------------------------------------------------
# closed loop

@dataclass
class StepRecord:
    t: int
    x: np.ndarray
    u_applied: np.ndarray
    status: str
    objective: float | None
    avg_energy: float | None
    ees_value: float | None
    ees_bound: float | None
    softened: bool = False
    s_box: int | None = None
    s_P: int | None = None
    eps_hi: float | None = None
    objective_uncapped: float | None = None


@dataclass
class ClosedLoopTrace:
    records: list[StepRecord]
    n: int
    m: int
    metadata: dict = field(default_factory=dict)

    def header(self) -> list[str]:
        return (["t", "status", "softened", "objective", "objective_uncapped", "avg_energy",
                 "ees_value", "ees_bound", "s_box", "s_P", "eps_hi"]
                + [f"x_{i}" for i in range(self.n)] + [f"u_{j}" for j in range(self.m)])

    def rows(self):
        for r in self.records:
            yield ([str(r.t), r.status, str(int(r.softened)), _fmt(r.objective),
                    _fmt(r.objective_uncapped), _fmt(r.avg_energy), _fmt(r.ees_value),
                    _fmt(r.ees_bound), _fmt(r.s_box), _fmt(r.s_P), _fmt(r.eps_hi)]
                   + [_fmt(v) for v in r.x] + [_fmt(v) for v in r.u_applied])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        writer.writerows(self.rows())
        return buf.getvalue()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.12g}"


def config_hash(cfg: NetworkConfig, params: dict) -> str:
    blob = json.dumps({"config": cfg.raw, "params": params}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class CertifyOptions:
    """Per-step support discovery and certification settings."""

    beta: float = 1e-6
    N_r: int = 3000
    N_T: int = 57886
    mu: float = 1e-3
    rho: float = 5e-4
    max_rounds: int = 1000


def closed_loop(cfg: NetworkConfig, N: int, N_s: int, k: int, M: float, horizon_T: int,
                seed: int = 0, start_hour: int = 0, certify: CertifyOptions | None = None,
                shadow_uncapped: bool = False, soft_penalty: float = SOFT_PENALTY,
                u_prev=None) -> ClosedLoopTrace:
    """Receding-horizon simulation with fresh scenarios at every step.

    A step whose hard problem is infeasible is re-solved with penalized state
    and terminal slacks (the EES cap stays hard). If that also fails the
    previous input is held. ``shadow_uncapped`` additionally solves the
    uncapped problem from the same state and scenarios.
    """
    if horizon_T < 0:
        raise ParameterError("horizon_T must be >= 0")
    sys, cons = cfg.system, cfg.cons
    x = cfg.x0.copy()
    u_last = steady_input(sys, cons, cfg.demand.d_bar) if u_prev is None else np.asarray(u_prev, float)
    records: list[StepRecord] = []
    for t in range(horizon_T):
        hour = start_hour + t
        scen = draw_scenarios(cfg.tariff, N, sys.m, N_s, rng=np.random.default_rng([seed, t, 0]),
                              start_hour=hour)
        demands = cfg.demand.demands(hour, N)
        problem = SempcProblem(sys, cons, scen, N, demands, x, u_last, k=k, M=M, R=cfg.R,
                               terminal_weight=cfg.terminal_weight)
        sol = solve_sempc(problem)
        softened = False
        if sol.status == "infeasible":
            soft = solve_sempc(problem.replace(soft_penalty=soft_penalty))
            if soft.status == "optimal":
                sol, softened = soft, True
        rec = StepRecord(t, x.copy(), u_last.copy(), sol.status, sol.objective, sol.avg_energy,
                         sol.ees_value, sol.ees_bound, softened)
        if shadow_uncapped and sol.status == "optimal":
            free = solve_sempc(problem.replace(M=math.inf,
                                               soft_penalty=soft_penalty if softened else None))
            rec.objective_uncapped = free.objective
        if sol.status == "optimal":
            u_apply = sol.u_tilde[: sys.m].copy()
            if certify is not None:
                P = condense(sys, cons, x, demands, N)
                scfg = SupportConfig(certify.N_r, certify.N_T, k, certify.mu, certify.rho,
                                     certify.max_rounds, seed=int(seed) * 100003 + t)
                report = discover_support(scen, scfg, P, on_indeterminate="keep")
                rec.s_box = report.box.size
                rec.s_P = int(report.in_P.size)
                rec.eps_hi = certify_solution(rec.s_P, N_s, certify.beta).eps_hi
        else:
            u_apply = np.clip(u_last, cons.u_lo, cons.u_hi)
        rec.u_applied = u_apply
        records.append(rec)
        x = simulate(sys, x, u_apply[None, :], demands[:1])[1]
        u_last = u_apply
    params = {"N": N, "N_s": N_s, "k": k, "M": None if math.isinf(M) else M, "horizon_T": horizon_T, "seed": seed,
              "start_hour": start_hour, "certify": None if certify is None else certify.__dict__}
    meta = {"seed": seed, "config_hash": config_hash(cfg, params), "params": params,
            "steps": horizon_T, "violation_tol": CHECK_TOL}
    return ClosedLoopTrace(records, sys.n, sys.m, meta)
