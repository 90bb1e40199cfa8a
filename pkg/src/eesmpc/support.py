"""Support-element discovery for the region below the k-th largest cost.

A scenario is of support when its cost is among the ``k`` largest for at
least one admissible input. :func:`find_support_box` estimates the support
set over the input box by sampling and testing rounds;
:func:`filter_support_in_P` then keeps only the candidates that can reach
the top ``k`` somewhere inside the MPC feasible set.

Scenario indices are 0-based throughout.
"""
from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, NonTerminationError, ParameterError, SolverLimitError
from .optim import ConicProgram, MixedBinaryFeasibility, SocBlock, solve_conic, solve_mixed_binary
from .plantmodel import FeasibleSet
from .riskmeasures import top_k_rows

# rows of (samples x scenarios) loss matrix evaluated at once
_CHUNK_ENTRIES = 8_000_000


@dataclass(frozen=True)
class SupportConfig:
    N_r: int
    N_T: int
    k: int
    mu: float
    rho: float
    max_rounds: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.N_r < 1 or self.N_T < 1:
            raise ParameterError("N_r and N_T must be >= 1")
        if not 0.0 < self.rho < self.mu < 1.0:
            raise ParameterError("need 0 < rho < mu < 1")
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.max_rounds < 1:
            raise ParameterError("max_rounds must be >= 1")


@dataclass
class SupportResult:
    indices: np.ndarray
    p_hat: float
    rounds: int
    samples_used: int
    history: list[float] = field(default_factory=list)
    # the count is a sampled lower estimate, not a proven support set
    heuristic: bool = True

    @property
    def size(self) -> int:
        return int(self.indices.size)


def _scenarios(scenarios) -> np.ndarray:
    S = np.atleast_2d(np.asarray(scenarios, dtype=float))
    if S.shape[0] == 0 or not np.all(np.isfinite(S)):
        raise ParameterError("scenarios must be a non-empty finite matrix")
    return S


def _box(u_box, dim: int):
    lo, hi = (np.asarray(b, dtype=float).ravel() for b in u_box)
    if lo.size != dim or hi.size != dim:
        raise DimensionError(f"input box must have {dim} coordinates")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ParameterError("input box must be bounded")
    if np.any(lo > hi):
        raise ParameterError("input box is empty")
    return lo, hi


def sample_inputs(seed: int, round_index: int, count: int, u_box) -> np.ndarray:
    """Uniform inputs on the box; round 0 is the initial batch.

    The stream for each round is derived from ``(seed, round_index)`` so any
    round can be regenerated independently.
    """
    lo, hi = (np.asarray(b, dtype=float).ravel() for b in u_box)
    rng = np.random.default_rng([int(seed), int(round_index)])
    return lo + (hi - lo) * rng.random((count, lo.size))


def _top_sets(S: np.ndarray, U: np.ndarray, k: int):
    """Yield top-k index rows for the inputs ``U``, chunked by memory."""
    rows = max(1, _CHUNK_ENTRIES // S.shape[0])
    for start in range(0, U.shape[0], rows):
        yield top_k_rows(U[start:start + rows] @ S.T, k)


def find_support_box(scenarios, cfg: SupportConfig, u_box) -> SupportResult:
    """Sample-and-test estimate of the support set over the input box."""
    S = _scenarios(scenarios)
    if cfg.k > S.shape[0]:
        raise ParameterError(f"k={cfg.k} exceeds the number of scenarios {S.shape[0]}")
    _box(u_box, S.shape[1])
    known = np.zeros(S.shape[0], dtype=bool)
    U = sample_inputs(cfg.seed, 0, cfg.N_r, u_box)
    for top in _top_sets(S, U, cfg.k):
        known[top.ravel()] = True
    samples = cfg.N_r
    history: list[float] = []
    threshold = cfg.mu - cfg.rho
    for rnd in range(1, cfg.max_rounds + 1):
        U = sample_inputs(cfg.seed, rnd, cfg.N_T, u_box)
        samples += cfg.N_T
        hits = 0
        for top in _top_sets(S, U, cfg.k):
            fresh = ~known[top]
            if fresh.any():
                # a sample counts once, when it is the first to show some new index
                flat_rows = np.repeat(np.arange(top.shape[0]), top.shape[1])[fresh.ravel()]
                flat_idx = top.ravel()[fresh.ravel()]
                _, first = np.unique(flat_idx, return_index=True)
                hits += np.unique(flat_rows[first]).size
                known[flat_idx] = True
        p_hat = hits / cfg.N_T
        history.append(p_hat)
        if p_hat <= threshold:
            return SupportResult(np.nonzero(known)[0], p_hat, rnd, samples, history)
    partial = SupportResult(np.nonzero(known)[0], history[-1], cfg.max_rounds, samples, history)
    raise NonTerminationError(f"no test round reached p_hat <= {threshold:g} in {cfg.max_rounds} rounds",
                              partial)


def big_g_bound(scenarios, u_box) -> float:
    """Largest pairwise cost gap over the box, floored at 1.

    Any ``G`` at least this large makes a relaxed linking row vacuous.
    """
    S = _scenarios(scenarios)
    lo, hi = _box(u_box, S.shape[1])
    n = S.shape[0]
    best = 0.0
    rows = max(1, 4_000_000 // max(n * S.shape[1], 1))
    for start in range(0, n, rows):
        diff = S[start:start + rows, None, :] - S[None, :, :]
        gap = np.maximum(diff * lo, diff * hi).sum(axis=2)
        best = max(best, float(gap.max()))
    return max(best, 1.0)


def _g_needed(S: np.ndarray, j: int, lo, hi) -> float:
    diff = S - S[j]
    return float(np.maximum(diff * lo, diff * hi).sum(axis=1).max())


def _set_program(P: FeasibleSet, A_rows=None) -> ConicProgram:
    A_ub, b_ub = P.Bbar, P.Abar
    if A_rows is not None and len(A_rows):
        A_ub = np.vstack((A_ub, A_rows))
        b_ub = np.concatenate((b_ub, np.zeros(len(A_rows))))
    socs = []
    if P.Bhat.shape[0]:
        F, g, radius = P.terminal_soc()
        socs.append(SocBlock(F, g, np.zeros(P.dim), radius))
    return ConicProgram(np.zeros(P.dim), A_ub=A_ub, b_ub=b_ub, socs=socs, lb=P.u_lo, ub=P.u_hi)


def _status_to_bool(status: str, what: str) -> bool:
    if status == "optimal":
        return True
    if status == "infeasible":
        return False
    raise SolverLimitError(f"{what}: solver returned {status}")


def support_in_feasible_set(j: int, scenarios, P: FeasibleSet, k: int, G: float,
                            candidates=None, method: str = "auto",
                            time_limit: float | None = None) -> bool:
    """Whether scenario ``j`` is among the ``k`` largest costs for some ``u`` in ``P``.

    ``candidates`` restricts which scenarios may exceed ``j``; every other
    scenario is required to stay at or below it. ``method`` is ``"enumerate"``
    (exceeder subsets, used by default for k <= 3) or ``"bnb"`` (binary
    indicators with big-G rows). Raises :class:`SolverLimitError` when the
    answer is indeterminate.
    """
    S = _scenarios(scenarios)
    n_s = S.shape[0]
    if not 0 <= j < n_s:
        raise ParameterError(f"scenario index {j} out of range")
    if not 1 <= k <= n_s:
        raise ParameterError(f"k={k} must lie in [1, {n_s}]")
    if S.shape[1] != P.dim:
        raise DimensionError("scenario length does not match the feasible set")
    need = _g_needed(S, j, P.u_lo, P.u_hi)
    if G < need * (1 - 1e-12):
        raise ParameterError(f"G={G:g} too small; need at least {need:g}")
    others = np.array([i for i in range(n_s) if i != j], dtype=int)
    if candidates is None:
        cand = others
    else:
        cand = np.intersect1d(np.asarray(list(candidates), dtype=int), others)
    fixed = np.setdiff1d(others, cand)
    diff = S - S[j]
    if method == "auto":
        method = "enumerate" if k <= 3 else "bnb"
    if method == "enumerate":
        size = min(k - 1, cand.size)
        for exceeders in itertools.combinations(cand.tolist(), size):
            below = np.setdiff1d(others, exceeders)
            res = solve_conic(_set_program(P, diff[below]), time_limit)
            if _status_to_bool(res.status, f"support check j={j}"):
                return True
        return False
    if method != "bnb":
        raise ParameterError(f"unknown method {method!r}")
    cont = _set_program(P, diff[fixed])
    f = MixedBinaryFeasibility(
        cont, link_A=diff[cand], link_b=np.zeros(cand.size), link_var=np.arange(cand.size),
        G=G, n_binary=cand.size, min_ones=max(0, cand.size - (k - 1)))
    res = solve_mixed_binary(f, time_limit)
    if res.status == "limit":
        raise SolverLimitError(f"support check j={j}: branch-and-bound hit its limit")
    return res.status == "feasible"


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SEMPC_THREADS", "1")))
    except ValueError:
        return 1


def filter_support_in_P(I_k, scenarios, P: FeasibleSet, k: int, G: float,
                        method: str = "auto", time_limit: float | None = None,
                        on_indeterminate: str = "raise") -> np.ndarray:
    """Members of ``I_k`` that can reach the top ``k`` inside ``P``.

    With ``on_indeterminate="keep"`` a candidate whose check hits a solver
    limit is kept, which can only enlarge the support count.
    """
    idx = np.asarray(sorted(int(i) for i in I_k), dtype=int)
    if idx.size == 0:
        return idx
    if on_indeterminate not in ("raise", "keep"):
        raise ParameterError("on_indeterminate must be 'raise' or 'keep'")

    def check(j):
        try:
            return support_in_feasible_set(j, scenarios, P, k, G, candidates=idx,
                                           method=method, time_limit=time_limit)
        except SolverLimitError:
            if on_indeterminate == "keep":
                return True
            raise

    workers = _workers()
    if workers > 1 and idx.size > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            keep = list(pool.map(check, idx.tolist()))
    else:
        keep = [check(j) for j in idx.tolist()]
    return idx[np.asarray(keep, dtype=bool)]


@dataclass
class SupportReport:
    box: SupportResult
    in_P: np.ndarray | None
    G: float

    def as_dict(self) -> dict:
        return {
            "I_k": self.box.indices.tolist(),
            "I_k_P": None if self.in_P is None else self.in_P.tolist(),
            "s_box": self.box.size,
            "s_P": None if self.in_P is None else int(self.in_P.size),
            "p_hat": self.box.p_hat,
            "rounds": self.box.rounds,
            "N_T_used": self.box.samples_used,
            "heuristic": True,
        }


def discover_support(scenarios, cfg: SupportConfig, P: FeasibleSet | None = None,
                     u_box=None, on_indeterminate: str = "raise") -> SupportReport:
    """Run the box search and, when ``P`` is given, the filter into ``P``."""
    if u_box is None:
        if P is None:
            raise ParameterError("need an input box or a feasible set")
        u_box = (P.u_lo, P.u_hi)
    box = find_support_box(scenarios, cfg, u_box)
    G = big_g_bound(scenarios, u_box)
    in_P = None
    if P is not None:
        in_P = filter_support_in_P(box.indices, scenarios, P, cfg.k, G,
                                   on_indeterminate=on_indeterminate)
    return SupportReport(box, in_P, G)
