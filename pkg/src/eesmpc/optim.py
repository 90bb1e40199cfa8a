"""Solver contracts: convex QP/SOCP and mixed-binary feasibility.

Continuous problems go to the Clarabel interior-point solver. Mixed-binary
problems are handled by a small depth-first branch-and-bound over conic
relaxations.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from .exceptions import DimensionError, ParameterError

FEAS_TOL = 1e-8
CHECK_TOL = 1e-6
INT_TOL = 1e-6


@dataclass(frozen=True)
class SocBlock:
    """Second-order cone ``||F x + g|| <= h @ x + d``."""

    F: np.ndarray
    g: np.ndarray
    h: np.ndarray
    d: float


@dataclass
class ConicProgram:
    """``min x'Qx + c'x + constant`` over linear, bound and SOC constraints."""

    c: np.ndarray
    Q: np.ndarray | None = None
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    socs: list[SocBlock] = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    constant: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.Q is not None:
            self.Q = np.asarray(self.Q, dtype=float)
            if self.Q.shape != (n, n):
                raise DimensionError(f"Q must be {n}x{n}")
            self.Q = 0.5 * (self.Q + self.Q.T)
            eig = np.linalg.eigvalsh(self.Q)
            if eig.size and eig.min() < -1e-9 * max(1.0, abs(eig).max()):
                raise ParameterError(f"objective matrix not PSD (min eigenvalue {eig.min():.3e})")
        self.A_ub, self.b_ub = _block(self.A_ub, self.b_ub, n, "A_ub")
        self.A_eq, self.b_eq = _block(self.A_eq, self.b_eq, n, "A_eq")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.lb.size != n or self.ub.size != n:
            raise DimensionError("bounds must have one entry per variable")
        for blk in self.socs:
            if blk.F.shape[1] != n or blk.h.size != n or blk.g.size != blk.F.shape[0]:
                raise DimensionError("SOC block dimensions do not match the variable count")

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        val = float(self.c @ x) + self.constant
        if self.Q is not None:
            val += float(x @ self.Q @ x)
        return val

    def max_violation(self, x) -> float:
        """Largest constraint violation at ``x`` (0 when feasible)."""
        x = np.asarray(x, dtype=float)
        worst = 0.0
        if self.b_ub.size:
            worst = max(worst, float(np.max(self.A_ub @ x - self.b_ub)))
        if self.b_eq.size:
            worst = max(worst, float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        worst = max(worst, float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0)))
        for blk in self.socs:
            worst = max(worst, float(np.linalg.norm(blk.F @ x + blk.g) - blk.h @ x - blk.d))
        return max(worst, 0.0)


def _block(A, b, n, name):
    if A is None or np.size(A) == 0:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape[1] != n or A.shape[0] != b.size:
        raise DimensionError(f"{name} has shape {A.shape}, rhs {b.size}, expected {n} columns")
    return A, b


@dataclass
class ConicResult:
    status: str  # optimal | infeasible | unbounded | limit
    x: np.ndarray | None = None
    value: float | None = None
    solver_status: str = ""
    solve_time: float = 0.0


_STATUS = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _settings(time_limit: float | None):
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.tol_feas = FEAS_TOL
    st.tol_gap_abs = FEAS_TOL
    st.tol_gap_rel = FEAS_TOL
    st.tol_infeas_abs = FEAS_TOL
    st.tol_infeas_rel = FEAS_TOL
    st.max_iter = 500
    if time_limit is not None:
        st.time_limit = float(time_limit)
    return st


def _compile(p: ConicProgram):
    """Translate to Clarabel's ``A x + s = b, s in K`` form."""
    n = p.n
    rows, rhs, cones = [], [], []
    if p.b_eq.size:
        rows.append(p.A_eq)
        rhs.append(p.b_eq)
        cones.append(clarabel.ZeroConeT(p.b_eq.size))
    eye = np.eye(n)
    fin_ub = np.isfinite(p.ub)
    fin_lb = np.isfinite(p.lb)
    lin = [p.A_ub, eye[fin_ub], -eye[fin_lb]]
    lin_rhs = [p.b_ub, p.ub[fin_ub], -p.lb[fin_lb]]
    n_lin = sum(r.size for r in lin_rhs)
    if n_lin:
        rows.extend(lin)
        rhs.extend(lin_rhs)
        cones.append(clarabel.NonnegativeConeT(n_lin))
    for blk in p.socs:
        rows.append(-np.asarray(blk.h, dtype=float)[None, :])
        rhs.append(np.array([blk.d], dtype=float))
        rows.append(-np.asarray(blk.F, dtype=float))
        rhs.append(np.asarray(blk.g, dtype=float))
        cones.append(clarabel.SecondOrderConeT(1 + blk.F.shape[0]))
    A = sp.csc_matrix(np.vstack(rows)) if rows else sp.csc_matrix((0, n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    P = sp.csc_matrix(2.0 * p.Q) if p.Q is not None else sp.csc_matrix((n, n))
    # Clarabel wants the upper triangle of P
    P = sp.triu(P, format="csc")
    return P, p.c.copy(), A, b, cones


def solve_conic(p: ConicProgram, time_limit: float | None = None) -> ConicResult:
    """Solve a convex conic program; the status is never silently coerced."""
    P, q, A, b, cones = _compile(p)
    start = time.perf_counter()
    if A.shape[0] == 0:
        # unconstrained: add a vacuous row so the solver has a cone to work with
        A = sp.csc_matrix((1, p.n))
        b = np.ones(1)
        cones = [clarabel.NonnegativeConeT(1)]
    solver = clarabel.DefaultSolver(P, q, A, b, cones, _settings(time_limit))
    sol = solver.solve()
    elapsed = time.perf_counter() - start
    name = str(sol.status)
    status = _STATUS.get(name, "limit")
    if status == "optimal":
        x = np.asarray(sol.x, dtype=float)
        if name == "AlmostSolved" and p.max_violation(x) > CHECK_TOL:
            return ConicResult("limit", x, None, name, elapsed)
        return ConicResult("optimal", x, p.objective(x), name, elapsed)
    return ConicResult(status, None, None, name, elapsed)


# ---------------------------------------------------------------------------
# mixed-binary feasibility

@dataclass
class MixedBinaryFeasibility:
    """Continuous conic block plus binaries that switch linear rows on and off.

    Row ``r`` reads ``link_A[r] @ x <= link_b[r] + G[r] * (1 - z[link_var[r]])``,
    so ``z = 1`` enforces the row and ``z = 0`` relaxes it. The cardinality
    row is ``sum(z) >= min_ones``.
    """

    continuous: ConicProgram
    link_A: np.ndarray
    link_b: np.ndarray
    link_var: np.ndarray
    G: np.ndarray | float
    n_binary: int
    min_ones: int

    def __post_init__(self):
        n = self.continuous.n
        self.link_A = np.atleast_2d(np.asarray(self.link_A, dtype=float)).reshape(-1, n)
        self.link_b = np.asarray(self.link_b, dtype=float).ravel()
        self.link_var = np.asarray(self.link_var, dtype=int).ravel()
        r = self.link_b.size
        if self.link_A.shape[0] != r or self.link_var.size != r:
            raise DimensionError("linking rows are inconsistent")
        self.G = np.broadcast_to(np.asarray(self.G, dtype=float), (r,)).copy()
        if not np.all(np.isfinite(self.G)):
            raise ParameterError("G must be finite")
        if r and (self.link_var.min() < 0 or self.link_var.max() >= self.n_binary):
            raise DimensionError("link_var refers to a missing binary")
        if self.n_binary and np.setdiff1d(np.arange(self.n_binary), self.link_var).size:
            raise ParameterError("every binary must appear in at least one linking row")

    def check(self, x, z, tol: float = CHECK_TOL) -> bool:
        """Whether ``(x, z)`` satisfies every row with integral ``z``."""
        z = np.asarray(z, dtype=float)
        if np.any(np.abs(z - np.round(z)) > 0) or z.sum() < self.min_ones:
            return False
        if self.continuous.max_violation(x) > tol:
            return False
        lhs = self.link_A @ x - self.link_b - self.G * (1.0 - z[self.link_var])
        return bool(np.all(lhs <= tol))


@dataclass
class MixedBinaryResult:
    status: str  # feasible | infeasible | limit (feasibility mode); optimal in maximize mode
    x: np.ndarray | None = None
    z: np.ndarray | None = None
    value: float | None = None
    nodes: int = 0


class _Relaxation:
    """Conic relaxation over ``(x, z)`` with per-node bounds on ``z``."""

    def __init__(self, f: MixedBinaryFeasibility):
        cont = f.continuous
        n, nb = cont.n, f.n_binary
        self.n, self.nb = n, nb
        Z = np.zeros((f.link_A.shape[0], nb))
        Z[np.arange(f.link_A.shape[0]), f.link_var] = f.G
        A_link = np.hstack((f.link_A, Z))
        b_link = f.link_b + f.G
        card = np.concatenate((np.zeros(n), -np.ones(nb)))[None, :]
        pad = np.zeros((cont.A_ub.shape[0], nb))
        self.A_ub = np.vstack((np.hstack((cont.A_ub, pad)), A_link, card))
        self.b_ub = np.concatenate((cont.b_ub, b_link, [-float(f.min_ones)]))
        self.A_eq = np.hstack((cont.A_eq, np.zeros((cont.A_eq.shape[0], nb))))
        self.b_eq = cont.b_eq
        self.socs = [SocBlock(np.hstack((s.F, np.zeros((s.F.shape[0], nb)))), s.g,
                              np.concatenate((s.h, np.zeros(nb))), s.d) for s in cont.socs]
        self.lb_x, self.ub_x = cont.lb, cont.ub
        # maximize sum(z): steers relaxations toward integral vertices
        self.c = np.concatenate((np.zeros(n), -np.ones(nb)))

    def solve(self, z_lo, z_hi, time_limit):
        p = ConicProgram(self.c, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
                         socs=self.socs, lb=np.concatenate((self.lb_x, z_lo)),
                         ub=np.concatenate((self.ub_x, z_hi)))
        return solve_conic(p, time_limit)


def _fixed_check(f: MixedBinaryFeasibility, z: np.ndarray, time_limit):
    """Solve the continuous block with binaries fixed at ``z``."""
    # a switched-off row is relaxed by G, not dropped
    rhs = f.link_b + f.G * (1.0 - z[f.link_var])
    cont = f.continuous
    p = ConicProgram(np.zeros(cont.n), A_ub=np.vstack((cont.A_ub, f.link_A)),
                     b_ub=np.concatenate((cont.b_ub, rhs)),
                     A_eq=cont.A_eq, b_eq=cont.b_eq, socs=cont.socs, lb=cont.lb, ub=cont.ub)
    return solve_conic(p, time_limit)


def solve_mixed_binary(f: MixedBinaryFeasibility, time_limit: float | None = None,
                       mode: str = "feasibility") -> MixedBinaryResult:
    """Depth-first branch-and-bound on the binaries.

    ``mode="feasibility"`` stops at the first verified witness;
    ``mode="maximize"`` maximizes ``sum(z)`` and returns status ``optimal``.
    Branching picks the most fractional binary and dives toward the
    relaxation's rounding first.
    """
    if mode not in ("feasibility", "maximize"):
        raise ParameterError(f"unknown mode {mode!r}")
    deadline = None if time_limit is None else time.perf_counter() + time_limit
    nb = f.n_binary
    if f.min_ones > nb:
        return MixedBinaryResult("infeasible")
    relax = _Relaxation(f)
    stack = [(np.zeros(nb), np.ones(nb))]
    best: MixedBinaryResult | None = None
    nodes = 0

    def remaining():
        if deadline is None:
            return None
        return max(deadline - time.perf_counter(), 1e-3)

    while stack:
        if deadline is not None and time.perf_counter() > deadline:
            return MixedBinaryResult("limit", nodes=nodes)
        z_lo, z_hi = stack.pop()
        if z_hi.sum() < f.min_ones:
            continue
        nodes += 1
        res = relax.solve(z_lo, z_hi, remaining())
        if res.status == "infeasible":
            continue
        if res.status != "optimal":
            return MixedBinaryResult("limit", nodes=nodes)
        z = res.x[relax.n:]
        bound = float(z.sum())
        if best is not None and np.floor(bound + INT_TOL) <= best.value:
            continue
        frac = np.abs(z - np.round(z))
        free = np.nonzero(z_lo < z_hi)[0]
        if np.all(frac <= INT_TOL):
            z_int = np.round(z)
            fixed = _fixed_check(f, z_int, remaining())
            if fixed.status == "optimal" and f.check(fixed.x, z_int):
                cand = MixedBinaryResult("feasible", fixed.x, z_int, float(z_int.sum()), nodes)
                if mode == "feasibility":
                    return cand
                if best is None or cand.value > best.value:
                    best = cand
                # the relaxation bound is attained, so the subtree is closed
                continue
            elif fixed.status not in ("optimal", "infeasible"):
                return MixedBinaryResult("limit", nodes=nodes)
            elif free.size == 0:
                continue
            else:
                j = int(free[0])
        else:
            # most fractional among the free binaries, lowest index on ties
            cand_frac = np.where(z_lo < z_hi, np.abs(z - 0.5), np.inf)
            j = int(np.argmin(cand_frac))
        lo0, hi0 = z_lo.copy(), z_hi.copy()
        hi0[j] = 0.0
        lo1, hi1 = z_lo.copy(), z_hi.copy()
        lo1[j] = 1.0
        # push the less promising child first so the other is explored next
        if z[j] >= 0.5:
            stack.extend([(lo0, hi0), (lo1, hi1)])
        else:
            stack.extend([(lo1, hi1), (lo0, hi0)])
    if best is not None:
        best.status = "optimal"
        best.nodes = nodes
        return best
    return MixedBinaryResult("infeasible", nodes=nodes)
