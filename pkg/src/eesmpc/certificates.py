"""Risk bounds from support-element counts and the test-sample size bound.

The risk-bound polynomial

    C(m,k) t^(m-k) - b/(2m) sum_{i=k}^{m-1} C(i,k) t^(i-k)
                   - b/(6m) sum_{i=m+1}^{4m} C(i,k) t^(i-k) = 0

has coefficients far outside double range for m in the thousands, so every
evaluation works with logarithms of the three (non-negative) term groups and
only the sign of ``log T1 - log(T2 + T3)`` is used for root isolation. The
search variable is ``s = ln t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln, logsumexp

from .exceptions import NumericalError, ParameterError

RESIDUAL_TOL = 1e-9
_S_MIN = -40.0
_MAX_BISECT = 200


@dataclass(frozen=True)
class RiskBoundQuery:
    m: int
    k: int
    beta: float

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ParameterError(f"m={self.m} must be a positive integer")
        if int(self.k) != self.k or self.k < 0:
            raise ParameterError(f"k={self.k} must be a non-negative integer")
        if self.k > self.m:
            raise ParameterError("k exceeds m")
        if not 0.0 < self.beta < 1.0:
            raise ParameterError(f"beta={self.beta} must lie in (0, 1)")


@dataclass(frozen=True)
class RiskCertificate:
    query: RiskBoundQuery
    eps_lo: float
    eps_hi: float
    t_lo: float
    t_hi: float
    residuals: tuple[float, ...] = ()
    scope: str = "decision-region"
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "m": self.query.m,
            "k": self.query.k,
            "beta": self.query.beta,
            "eps_lo": self.eps_lo,
            "eps_hi": self.eps_hi,
            "t_lo": self.t_lo,
            "t_hi": self.t_hi,
            "scope": self.scope,
            **self.metadata,
        }


@dataclass(frozen=True)
class TestSizeQuery:
    mu: float
    rho: float
    beta_bar: float

    # keep pytest from collecting this as a test class
    __test__ = False

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ParameterError(f"mu={self.mu} must lie in (0, 1)")
        if not 0.0 < self.rho < self.mu:
            raise ParameterError(f"rho={self.rho} must lie in (0, mu)")
        if not 0.0 < self.beta_bar < 1.0:
            raise ParameterError(f"beta_bar={self.beta_bar} must lie in (0, 1)")


class _BoundPolynomial:
    """Log-domain evaluator for one (m, k, beta) query."""

    def __init__(self, q: RiskBoundQuery):
        m, k, beta = q.m, q.k, q.beta
        self.m, self.k = m, k
        log_fact = gammaln(np.arange(4 * m + 1, dtype=float) + 1.0)

        def log_comb(i):
            return log_fact[i] - log_fact[k] - log_fact[i - k]

        if k < m:
            self.log_t1_coef = float(log_comb(np.array(m)))
            self.t1_power = m - k
            i2 = np.arange(k, m)
            i3 = np.arange(m + 1, 4 * m + 1)
            self.coefs = np.concatenate((
                log_comb(i2) + math.log(beta / (2 * m)),
                log_comb(i3) + math.log(beta / (6 * m)),
            ))
            self.powers = np.concatenate((i2 - k, i3 - k)).astype(float)
        else:
            # 1 - b/(6m) sum_{i=m+1}^{4m} C(i,m) t^(i-m)
            self.log_t1_coef = 0.0
            self.t1_power = 0
            i3 = np.arange(m + 1, 4 * m + 1)
            self.coefs = log_comb(i3) + math.log(beta / (6 * m))
            self.powers = (i3 - m).astype(float)

    def log_terms(self, s):
        """Return ``(log T1, log(T2 + T3))`` at ``s = ln t`` (vectorized)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        log_t1 = self.log_t1_coef + self.t1_power * s
        log_rest = logsumexp(self.coefs[None, :] + self.powers[None, :] * s[:, None], axis=1)
        return log_t1, log_rest

    def gap(self, s) -> np.ndarray:
        """``log T1 - log(T2 + T3)``; same sign as the polynomial."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.empty(s.size)
        chunk = max(1, 4_000_000 // self.coefs.size)
        for lo in range(0, s.size, chunk):
            a, b = self.log_terms(s[lo:lo + chunk])
            out[lo:lo + chunk] = a - b
        return out

    def residual(self, t: float) -> float:
        """Normalized residual ``|T1 - T2 - T3| / (T1 + T2 + T3)``."""
        if t <= 0.0:
            return 1.0 if self.k < self.m else 0.0
        g = float(self.gap(math.log(t))[0])
        return abs(math.tanh(g / 2.0))


def _bisect(poly: _BoundPolynomial, t_a: float, t_b: float) -> float:
    """Bisection in ``t`` on a bracket with a sign change of the polynomial."""
    g_a = poly.gap(math.log(t_a))[0]
    g_b = poly.gap(math.log(t_b))[0]
    if np.sign(g_a) == np.sign(g_b):
        raise NumericalError(f"no sign change on [{t_a}, {t_b}]")
    for _ in range(_MAX_BISECT):
        t_c = 0.5 * (t_a + t_b)
        if t_c <= t_a or t_c >= t_b:
            break
        g_c = poly.gap(math.log(t_c))[0]
        if g_c == 0.0:
            return t_c
        if np.sign(g_c) == np.sign(g_a):
            t_a, g_a = t_c, g_c
        else:
            t_b = t_c
    # pick the endpoint with the smaller residual
    return t_a if poly.residual(t_a) <= poly.residual(t_b) else t_b


def _upper_limit(poly: _BoundPolynomial) -> float:
    """Double ``t`` from 2 until the polynomial is negative."""
    t = 2.0
    for _ in range(200):
        if poly.gap(math.log(t))[0] < 0.0:
            return t
        t *= 2.0
    raise NumericalError("could not find t_max with a negative polynomial value")


def _find_roots(poly: _BoundPolynomial) -> tuple[float, float]:
    t_max = _upper_limit(poly)
    s_max = math.log(t_max)
    grid = np.union1d(
        np.linspace(_S_MIN, s_max, 401),
        np.linspace(max(_S_MIN, -2.0), min(1.0, s_max), 601),
    )
    g = poly.gap(grid)
    i = int(np.argmax(g))
    s_peak, g_peak = grid[i], g[i]
    if g_peak <= 0.0:
        lo = grid[max(i - 1, 0)]
        hi = grid[min(i + 1, grid.size - 1)]
        res = minimize_scalar(lambda s: -poly.gap(s)[0], bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-14})
        s_peak, g_peak = float(res.x), -float(res.fun)
    if g_peak <= 0.0:
        raise NumericalError(
            f"polynomial has no positive region (max log-gap {g_peak:.3e} at t={math.exp(s_peak):.6g}); "
            f"m={poly.m}, k={poly.k}")
    if g[0] >= 0.0:
        raise NumericalError(f"polynomial not negative at t=exp({_S_MIN})")
    # insert the peak and count sign changes: exactly two expected
    pos = int(np.searchsorted(grid, s_peak))
    if pos < grid.size and grid[pos] == s_peak:
        s_all, g_all = grid, g
    else:
        s_all = np.insert(grid, pos, s_peak)
        g_all = np.insert(g, pos, g_peak)
    changes = np.nonzero(np.diff(np.sign(g_all)) != 0)[0]
    if changes.size != 2:
        raise NumericalError(f"expected exactly two sign changes, found {changes.size}")
    roots = []
    for c in changes:
        roots.append(_bisect(poly, math.exp(s_all[c]), math.exp(s_all[c + 1])))
    return roots[0], roots[1]


def _find_single_root(poly: _BoundPolynomial) -> float:
    """Root of the k = m equation, which decreases monotonically in t."""
    t_max = _upper_limit(poly)
    t_min = math.exp(_S_MIN)
    if poly.gap(math.log(t_min))[0] <= 0.0:
        raise NumericalError("k=m polynomial not positive near t=0")
    return _bisect(poly, t_min, t_max)


def epsilon_bounds(q: RiskBoundQuery) -> RiskCertificate:
    """Lower and upper risk bounds for ``k`` support elements out of ``m`` scenarios."""
    poly = _BoundPolynomial(q)
    if q.k < q.m:
        t_lo, t_hi = _find_roots(poly)
        residuals = (poly.residual(t_lo), poly.residual(t_hi))
    else:
        t_lo = 0.0
        t_hi = _find_single_root(poly)
        residuals = (poly.residual(t_hi),)
    worst = max(residuals)
    if worst >= RESIDUAL_TOL:
        raise NumericalError(f"root residual {worst:.3e} above {RESIDUAL_TOL:g}")
    eps_lo = max(0.0, 1.0 - t_hi)
    eps_hi = min(1.0, 1.0 - t_lo)
    return RiskCertificate(q, eps_lo, eps_hi, t_lo, t_hi, residuals)


def certify_solution(s_star: int, m: int, beta: float) -> RiskCertificate:
    """Certificate on the probability that a new scenario's cost exceeds the EES at a solution.

    ``eps_hi`` upper-bounds that probability with confidence ``1 - beta``
    when ``s_star`` is the support count of the region below the k-th
    largest cost.
    """
    cert = epsilon_bounds(RiskBoundQuery(m, s_star, beta))
    return RiskCertificate(cert.query, cert.eps_lo, cert.eps_hi, cert.t_lo, cert.t_hi,
                           cert.residuals, scope="solution")


def binomial_tail_log(n_trials: np.ndarray, mu: float, rho: float) -> np.ndarray:
    """``log P[Bin(N, mu) <= floor(N (mu - rho))]`` for each ``N`` in ``n_trials``."""
    N = np.asarray(n_trials, dtype=np.int64)
    # small epsilon so that N*(mu-rho) landing on an integer is not floored down
    top = np.floor(N * (mu - rho) + 1e-9 * np.maximum(N * (mu - rho), 1.0)).astype(np.int64)
    width = int(top.max()) + 1 if N.size else 1
    i = np.arange(width)
    Nf = N.astype(float)[:, None]
    log_pmf = (gammaln(Nf + 1.0) - gammaln(i + 1.0) - gammaln(Nf - i + 1.0)
               + i * math.log(mu) + (Nf - i) * math.log1p(-mu))
    log_pmf = np.where(i[None, :] <= top[:, None], log_pmf, -np.inf)
    # terms below the mean increase with i, so ascending order is smallest first
    return logsumexp(log_pmf, axis=1)


def _satisfies(N: int, q: TestSizeQuery) -> bool:
    return bool(binomial_tail_log(np.array([N]), q.mu, q.rho)[0] < math.log(q.beta_bar))


def required_test_samples(q: TestSizeQuery) -> int:
    """Smallest ``N_T`` whose binomial tail falls below ``beta_bar``.

    The floor in the tail makes satisfaction non-monotone in ``N_T``, so the
    search doubles until some ``N`` satisfies the bound and then scans every
    integer below it in ascending order.
    """
    upper = 1
    while not _satisfies(upper, q):
        upper *= 2
        if upper > 1 << 40:
            raise NumericalError("test-size search exceeded 2^40 samples")
    log_bb = math.log(q.beta_bar)
    width = math.floor(upper * (q.mu - q.rho)) + 1
    chunk = max(1024, 4_000_000 // max(width, 1))
    start = 1
    while start <= upper:
        stop = min(upper, start + chunk - 1)
        N = np.arange(start, stop + 1)
        hits = np.nonzero(binomial_tail_log(N, q.mu, q.rho) < log_bb)[0]
        if hits.size:
            found = int(N[hits[0]])
            if not _satisfies(found, q):
                raise NumericalError("post-check of the test-size bound failed")
            return found
        start = stop + 1
    return upper
