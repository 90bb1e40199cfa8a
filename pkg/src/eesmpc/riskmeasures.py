"""Empirical risk functionals over scenario losses.

All functions take a 1-D array of loss realizations (one per scenario) and
return plain floats or index arrays. Indices are 0-based.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linprog

from .exceptions import DimensionError, NumericalError, ParameterError


def _as_losses(losses) -> np.ndarray:
    values = np.asarray(losses, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise DimensionError("losses must be a non-empty 1-D array")
    if not np.all(np.isfinite(values)):
        raise ParameterError("losses must be finite")
    return values


def _check_k(k: int, n: int) -> int:
    if int(k) != k or not 1 <= k <= n:
        raise ParameterError(f"k={k} must be an integer in [1, {n}]")
    return int(k)


def _check_zeta(zeta: float) -> None:
    if not 0.0 < zeta < 1.0:
        raise ParameterError(f"zeta={zeta} must lie in (0, 1)")


def empirical_var(losses, zeta: float) -> float:
    """Smallest order statistic ``l`` with empirical CDF ``#{L_i <= l}/n >= zeta``."""
    values = _as_losses(losses)
    _check_zeta(zeta)
    ordered = np.sort(values)
    n = ordered.size
    # ceil(zeta*n) with a guard against 0.5*4 -> 2.0000000000000004
    rank = math.ceil(zeta * n - 1e-12 * n)
    rank = min(max(rank, 1), n)
    return float(ordered[rank - 1])


def empirical_es(losses, zeta: float) -> float:
    """Mean of all losses at or above the empirical VaR."""
    values = _as_losses(losses)
    var = empirical_var(values, zeta)
    return float(values[values >= var].mean())


def ees(losses, k: int) -> float:
    """Empirical expected shortfall: the average of the ``k`` largest losses."""
    values = _as_losses(losses)
    k = _check_k(k, values.size)
    top = np.sort(values)[::-1][:k]
    return float(top.sum() / k)


def top_k_indices(losses, k: int) -> np.ndarray:
    """Indices of the ``k`` largest losses, sorted ascending.

    Ties are broken in favour of the smaller index.
    """
    values = _as_losses(losses)
    k = _check_k(k, values.size)
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k])


def top_k_rows(loss_matrix: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_indices` for a ``(samples, scenarios)`` matrix.

    Returns an integer array of shape ``(samples, k)`` with each row sorted.
    Uses a partial partition and falls back to a stable sort only on rows
    where the k-th and (k+1)-th largest values tie.
    """
    L = np.asarray(loss_matrix, dtype=float)
    if L.ndim != 2 or L.shape[1] == 0:
        raise DimensionError("loss_matrix must be 2-D with at least one column")
    n = L.shape[1]
    k = _check_k(k, n)
    if L.shape[0] == 0:
        return np.empty((0, k), dtype=np.intp)
    if k == n:
        return np.broadcast_to(np.arange(n), (L.shape[0], n)).copy()
    neg = -L
    part = np.argpartition(neg, k, axis=1)
    top = part[:, :k]
    rows = np.arange(L.shape[0])[:, None]
    kth = L[rows, top].min(axis=1)
    nxt = L[np.arange(L.shape[0]), part[:, k]]
    tied = np.nonzero(kth == nxt)[0]
    if tied.size:
        top = top.copy()
        top[tied] = np.argsort(neg[tied], axis=1, kind="stable")[:, :k]
    return np.sort(top, axis=1)


def k_largest_sum_lp(losses, k: int) -> float:
    """Optimal value of ``min k*t + sum(lam)`` s.t. ``lam_i >= L_i - t``, ``lam_i >= 0``.

    Evaluated in closed form at ``t = L_(k)``; equals the sum of the ``k``
    largest losses.
    """
    values = _as_losses(losses)
    k = _check_k(k, values.size)
    t_bar, lam = k_largest_sum_minimizer(values, k)
    return float(k * t_bar + lam.sum())


def k_largest_sum_minimizer(losses, k: int) -> tuple[float, np.ndarray]:
    """A minimizer ``(t, lam)`` of the k-largest-sum linear program."""
    values = _as_losses(losses)
    k = _check_k(k, values.size)
    t_bar = float(np.sort(values)[::-1][k - 1])
    lam = np.maximum(0.0, values - t_bar)
    return t_bar, lam


def k_largest_sum_lp_generic(losses, k: int) -> float:
    """Same quantity as :func:`k_largest_sum_lp`, solved with a generic LP solver.

    Kept as a cross-check of the closed form.
    """
    values = _as_losses(losses)
    k = _check_k(k, values.size)
    n = values.size
    # variables: [t, lam_1..lam_n]
    c = np.concatenate(([float(k)], np.ones(n)))
    A_ub = np.hstack((-np.ones((n, 1)), -np.eye(n)))
    b_ub = -values
    bounds = [(None, None)] + [(0.0, None)] * n
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise NumericalError(f"LP solver failed: {res.message}")
    return float(res.fun)
