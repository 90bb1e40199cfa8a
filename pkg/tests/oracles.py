"""Independent reference computations used by the tests.

Everything here avoids the package's own solvers: LPs go through scipy's
HiGHS interface and the rest is brute force.
"""
import itertools

import numpy as np
from scipy.optimize import linprog


def lp_feasible(A_ub, b_ub, lb, ub):
    n = len(lb)
    res = linprog(np.zeros(n), A_ub=A_ub if len(b_ub) else None, b_ub=b_ub if len(b_ub) else None,
                  bounds=list(zip(lb, ub)), method="highs")
    if res.status == 0:
        return True
    if res.status == 2:
        return False
    raise RuntimeError(f"linprog status {res.status}: {res.message}")


def enumerate_mixed_binary(A, b, lb, ub, link_A, link_b, link_var, G, n_binary, min_ones,
                           mode="feasibility"):
    """Try every binary assignment; returns (feasible, best sum of ones)."""
    best = None
    assignments = itertools.product((0, 1), repeat=n_binary)
    if mode == "maximize":
        assignments = sorted(assignments, key=lambda z: -sum(z))
    for z in assignments:
        z = np.asarray(z, dtype=float)
        if z.sum() < min_ones:
            continue
        rhs = link_b + G * (1.0 - z[link_var])
        if lp_feasible(np.vstack((A, link_A)), np.concatenate((b, rhs)), lb, ub):
            if mode == "feasibility":
                return True, z.sum()
            return True, z.sum()
    return False, best


def random_mixed_binary(rng, max_binary=12):
    """A random linear instance in the ``MixedBinaryFeasibility`` layout."""
    n = int(rng.integers(1, 4))
    nb = int(rng.integers(1, max_binary + 1))
    lb = -rng.uniform(0.5, 2.0, n)
    ub = rng.uniform(0.5, 2.0, n)
    n_rows = int(rng.integers(0, 3))
    A = rng.normal(size=(n_rows, n))
    b = rng.normal(scale=0.5, size=n_rows) + 0.2
    link_var = np.concatenate((np.arange(nb), rng.integers(0, nb, size=int(rng.integers(0, 3)))))
    r = link_var.size
    link_A = rng.normal(size=(r, n))
    link_b = rng.normal(scale=0.7, size=r) - 0.3
    G = rng.uniform(0.5, 6.0, r)
    min_ones = int(rng.integers(0, nb + 1))
    return dict(A=A, b=b, lb=lb, ub=ub, link_A=link_A, link_b=link_b, link_var=link_var, G=G,
                n_binary=nb, min_ones=min_ones)


def grid_support(S, k, lo, hi, points, member=None):
    """Indices that appear in some top-k set on a dense grid over the box.

    ``member`` (optional) masks grid points to a subset of the box. Grid
    points where the k-th and (k+1)-th values tie within ``1e-12`` are
    skipped so ties never decide membership.
    """
    S = np.asarray(S, dtype=float)
    axes = [np.linspace(l, h, points) for l, h in zip(lo, hi)]
    found = np.zeros(S.shape[0], dtype=bool)
    k_eff = min(k, S.shape[0])
    for block in _grid_blocks(axes):
        if member is not None:
            block = block[member(block)]
        if block.shape[0] == 0:
            continue
        L = block @ S.T
        order = np.argsort(-L, axis=1, kind="stable")
        if k_eff < S.shape[0]:
            Ls = np.take_along_axis(L, order, axis=1)
            clear = Ls[:, k_eff - 1] - Ls[:, k_eff] > 1e-12
            order = order[clear]
        found[order[:, :k_eff].ravel()] = True
    return np.nonzero(found)[0]


def _grid_blocks(axes, block=200_000):
    if len(axes) == 1:
        for s in range(0, axes[0].size, block):
            yield axes[0][s:s + block, None]
        return
    first, rest = axes[0], axes[1:]
    rest_grid = np.stack(np.meshgrid(*rest, indexing="ij"), axis=-1).reshape(-1, len(rest))
    step = max(1, block // rest_grid.shape[0])
    for s in range(0, first.size, step):
        f = first[s:s + step]
        yield np.hstack((np.repeat(f, rest_grid.shape[0])[:, None], np.tile(rest_grid, (f.size, 1))))


def _numba_grid_kernel():
    import numba

    @numba.njit(parallel=True, cache=True)
    def kernel(S, k, xs, ys, A, b, center, radius2, use_disc):
        n_s = S.shape[0]
        found = np.zeros((xs.size, n_s), dtype=np.bool_)
        for i in numba.prange(xs.size):
            vals = np.empty(n_s)
            order = np.empty(n_s, dtype=np.int64)
            for jy in range(ys.size):
                u0, u1 = xs[i], ys[jy]
                ok = True
                for r in range(A.shape[0]):
                    if A[r, 0] * u0 + A[r, 1] * u1 > b[r]:
                        ok = False
                        break
                if ok and use_disc:
                    d0, d1 = u0 - center[0], u1 - center[1]
                    if d0 * d0 + d1 * d1 > radius2:
                        ok = False
                if not ok:
                    continue
                # running list of the k+1 largest, kept sorted descending
                top = min(k + 1, n_s)
                filled = 0
                for s in range(n_s):
                    v = S[s, 0] * u0 + S[s, 1] * u1
                    if filled == top and v <= vals[top - 1]:
                        continue
                    pos = filled if filled < top else top - 1
                    while pos > 0 and vals[pos - 1] < v:
                        if pos < top:
                            vals[pos] = vals[pos - 1]
                            order[pos] = order[pos - 1]
                        pos -= 1
                    vals[pos] = v
                    order[pos] = s
                    if filled < top:
                        filled += 1
                if k < n_s and vals[k - 1] - vals[k] <= 1e-12:
                    continue
                for a in range(k):
                    found[i, order[a]] = True
        return found

    return kernel


_KERNEL = None


def grid_support_2d(S, k, lo, hi, points=10_000, A=None, b=None, disc=None):
    """Dense-grid top-k membership on a 2-D box, optionally cut by ``A u <= b`` and a disc."""
    global _KERNEL
    if _KERNEL is None:
        _KERNEL = _numba_grid_kernel()
    S = np.ascontiguousarray(S, dtype=float)
    xs = np.linspace(lo[0], hi[0], points)
    ys = np.linspace(lo[1], hi[1], points)
    A = np.zeros((0, 2)) if A is None else np.ascontiguousarray(A, dtype=float)
    b = np.zeros(0) if b is None else np.ascontiguousarray(b, dtype=float)
    if disc is None:
        center, r2, use = np.zeros(2), 0.0, False
    else:
        center, r2, use = np.asarray(disc[0], dtype=float), float(disc[1]) ** 2, True
    found = _KERNEL(S, int(k), xs, ys, A, b, center, r2, use)
    return np.nonzero(found.any(axis=0))[0]


def sempc_objective_direct(A, Bu, Bd, x0, D, S, k, M, R, u_prev, x_lo, x_hi, Omega, kappa, x_s,
                           terminal_weight, U):
    """Objective of many stacked input sequences ``U`` (rows), ``inf`` where infeasible.

    Built from a plain state recursion, not from the package's condensed form.
    """
    U = np.atleast_2d(U)
    N = D.shape[0]
    m = Bu.shape[1]
    X = np.tile(x0, (U.shape[0], 1))
    feasible = np.ones(U.shape[0], dtype=bool)
    smooth = np.zeros(U.shape[0])
    prev = np.tile(u_prev, (U.shape[0], 1))
    for l in range(N):
        u = U[:, l * m:(l + 1) * m]
        X = X @ A.T + u @ Bu.T + D[l] @ Bd.T
        if l < N - 1:
            feasible &= np.all((X >= x_lo - 1e-12) & (X <= x_hi + 1e-12), axis=1)
        du = u - prev
        smooth += np.einsum("si,ij,sj->s", du, R, du)
        prev = u
    e = X - x_s
    term = np.einsum("si,ij,sj->s", e, Omega, e)
    feasible &= term <= kappa + 1e-12
    L = U @ S.T
    top = -np.sort(-L, axis=1)[:, :k]
    feasible &= top.mean(axis=1) <= M + 1e-12
    val = L.mean(axis=1) + smooth + terminal_weight * term
    return np.where(feasible, val, np.inf)


def zoom_grid_minimize(f, lo, hi, points=41, rounds=40, keep=4):
    """Grid search that repeatedly zooms around the best few points."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = lo.size
    boxes = [(lo, hi)]
    best = np.inf
    for _ in range(rounds):
        cand = []
        for blo, bhi in boxes:
            axes = [np.linspace(a, b, points) for a, b in zip(blo, bhi)]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
            vals = f(grid)
            width = (bhi - blo) / (points - 1)
            for i in np.argsort(vals)[:keep]:
                if np.isfinite(vals[i]):
                    cand.append((vals[i], grid[i], width))
        if not cand:
            return best
        cand.sort(key=lambda c: c[0])
        best = min(best, cand[0][0])
        boxes = [(np.maximum(lo, x - 2 * w), np.minimum(hi, x + 2 * w)) for _, x, w in cand[:keep]]
    return best
