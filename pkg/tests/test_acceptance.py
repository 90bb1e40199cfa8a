"""Acceptance suite: one printed PASS/FAIL line per criterion.

The lines are collected in ``REPORT`` and echoed by the terminal-summary hook
in ``conftest.py``; running this file directly prints them as well.
"""
import json
import math
import time
import warnings

import numpy as np
import pytest
from scipy.stats import binom

from eesmpc.certificates import (RiskBoundQuery, TestSizeQuery, epsilon_bounds,
                                 required_test_samples)
from eesmpc.cli import main
from eesmpc.optim import ConicProgram, MixedBinaryFeasibility, solve_mixed_binary
from eesmpc.plantmodel import (ConstraintSets, FeasibleSet, LinearSystem, TariffModel,
                               draw_scenarios, load_config)
from eesmpc.riskmeasures import ees, k_largest_sum_lp, k_largest_sum_lp_generic
from eesmpc.sempc import CertifyOptions, SempcProblem, closed_loop, solve_sempc
from eesmpc.support import SupportConfig, discover_support
from oracles import (enumerate_mixed_binary, grid_support, grid_support_2d, random_mixed_binary,
                     sempc_objective_direct, zoom_grid_minimize)

REPORT = []

# closed-loop settings shared by the risk-cap, certificate and determinism checks
LOOP = dict(config="three_tank", N=12, N_s=200, k=2, M=64.0, T=48, seed=0)


def _report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    REPORT.append(line)
    print(line)
    return ok


def test_criterion_1_test_size():
    lines = []
    ok = True
    for (mu, rho, beta_bar), expected in (((1e-3, 5e-4, 1e-5), 57886), ((1e-4, 5e-5, 1e-6), 733984)):
        start = time.perf_counter()
        got = required_test_samples(TestSizeQuery(mu, rho, beta_bar))
        elapsed = time.perf_counter() - start
        satisfies = binom.cdf(math.floor(got * (mu - rho) + 1e-9), got, mu) < beta_bar
        close = abs(got - expected) <= 0.01 * expected
        ok &= close and satisfies and elapsed < 5.0
        lines.append(f"N_T({mu:g},{rho:g},{beta_bar:g})={got} (expected {expected}, {elapsed:.2f}s)")
    assert _report(1, ok, "; ".join(lines))


def test_criterion_2_risk_bounds():
    table = [(2000, 31, 0.005, 0.037), (2000, 23, 0.003, 0.031), (10000, 32, 0.001, 0.007)]
    ok = True
    parts = []
    for m, k, lo, hi in table:
        start = time.perf_counter()
        cert = epsilon_bounds(RiskBoundQuery(m, k, 1e-6))
        elapsed = time.perf_counter() - start
        good = (abs(cert.eps_lo - lo) <= 0.002 and abs(cert.eps_hi - hi) <= 0.002
                and max(cert.residuals) < 1e-9 and elapsed < 10.0)
        ok &= good
        parts.append(f"(m={m},k={k}) -> ({cert.eps_lo:.4f}, {cert.eps_hi:.4f}) "
                     f"res={max(cert.residuals):.1e} {elapsed:.2f}s")
    assert _report(2, ok, "; ".join(parts))


def test_criterion_3_k_largest_sum():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        k = int(rng.integers(1, n + 1))
        losses = rng.normal(scale=float(rng.choice([1e-3, 1.0, 1e3])), size=n)
        target = k * ees(losses, k)
        scale = max(1.0, abs(target))
        # closed form and a generic LP solve must both agree with k * EES
        worst = max(worst, abs(k_largest_sum_lp(losses, k) - target) / scale,
                    abs(k_largest_sum_lp_generic(losses, k) - target) / scale)
    assert _report(3, worst <= 1e-8, f"1000 vectors, worst relative gap {worst:.2e}")


def _interval_set(lower):
    """``u >= lower`` inside the box [-1, 1]."""
    return FeasibleSet(np.array([-lower]), np.array([[-1.0]]), np.zeros((0, 1)), np.zeros(0),
                       np.zeros((0, 0)), 1.0, np.array([-1.0]), np.array([1.0]))


def _support_cfg(k, seed):
    return SupportConfig(N_r=3000, N_T=57886, k=k, mu=1e-3, rho=5e-4, seed=seed)


@pytest.mark.slow
def test_criterion_4_support_oracle():
    warnings.simplefilter("ignore")
    mismatches = []
    # four cost lines through the origin, two per tail
    S = np.array([[1.0], [0.5], [-0.3], [-1.2]])
    rep = discover_support(S, _support_cfg(2, 0), _interval_set(0.2))
    if not (np.array_equal(rep.box.indices, grid_support(S, 2, [-1], [1], 10_000))
            and np.array_equal(rep.in_P, grid_support(S, 2, [0.2], [1], 10_000))):
        mismatches.append("four-line instance")
    rng = np.random.default_rng(2024)
    for inst in range(20):
        ns, k = int(rng.integers(3, 31)), int(rng.integers(1, 4))
        if inst < 8:
            S = rng.normal(size=(ns, 1))
            rep = discover_support(S, _support_cfg(k, inst), _interval_set(0.2))
            box = grid_support(S, k, [-1], [1], 10_000)
            inside = grid_support(S, k, [0.2], [1], 10_000)
        else:
            S = rng.uniform(0.5, 2.0, size=(ns, 2))
            lo, hi = rng.uniform(0.05, 0.5, 2), rng.uniform(1.0, 2.0, 2)
            a = rng.normal(size=2)
            mid = 0.5 * (lo + hi)
            b = np.array([a @ mid + 0.1])
            c = mid + rng.normal(scale=0.2, size=2)
            r = 0.6 * np.min(hi - lo)
            P = FeasibleSet(b, a[None, :], np.eye(2), -c, np.eye(2), r * r, lo, hi)
            rep = discover_support(S, _support_cfg(k, inst), P)
            box = grid_support_2d(S, k, lo, hi)
            inside = grid_support_2d(S, k, lo, hi, A=a[None, :], b=b, disc=(c, r))
        if not (np.array_equal(rep.box.indices, box) and np.array_equal(rep.in_P, inside)):
            mismatches.append(f"instance {inst}")
    ok = not mismatches
    detail = "21 instances match the 1e4-per-axis grid" if ok else f"mismatch: {mismatches}"
    assert _report(4, ok, detail)


@pytest.mark.slow
def test_criterion_5_mixed_binary():
    rng = np.random.default_rng(5)
    agree = feasible = 0
    for _ in range(200):
        inst = random_mixed_binary(rng, max_binary=12)
        expected, _ = enumerate_mixed_binary(**inst)
        cont = ConicProgram(np.zeros(inst["lb"].size), A_ub=inst["A"], b_ub=inst["b"],
                            lb=inst["lb"], ub=inst["ub"])
        f = MixedBinaryFeasibility(cont, inst["link_A"], inst["link_b"], inst["link_var"],
                                   inst["G"], inst["n_binary"], inst["min_ones"])
        res = solve_mixed_binary(f)
        got = res.status == "feasible"
        if got:
            got = f.check(res.x, res.z)
        agree += got == expected
        feasible += expected
    assert _report(5, agree == 200, f"{agree}/200 agree with enumeration ({feasible} feasible)")


def _desk_problem(rng):
    n = int(rng.integers(1, 3))
    m = 1 if n == 1 else int(rng.integers(1, 3))
    N = int(rng.integers(1, 4))
    while N * m > 3:
        N -= 1
    system = LinearSystem(np.eye(n) + 0.05 * rng.normal(size=(n, n)),
                          rng.uniform(0.5, 1.5, (n, m)), -np.eye(n))
    cons = ConstraintSets(np.zeros(n), np.full(n, 4.0), np.zeros(m), np.full(m, 2.0), np.eye(n),
                          4.0, np.full(n, 2.0))
    Ns = int(rng.integers(2, 6))
    S = draw_scenarios(TariffModel(), N, m, Ns, rng=rng)
    return SempcProblem(system, cons, S, N, rng.uniform(0.2, 0.8, (N, n)), rng.uniform(1, 3, n),
                        np.full(m, 0.5), k=int(rng.integers(1, Ns + 1)), R=0.1 * np.eye(m),
                        terminal_weight=0.2)


def test_criterion_6_desk_scale_optimality():
    rng = np.random.default_rng(6)
    worst = 0.0
    bad = 0
    for _ in range(10):
        p = _desk_problem(rng)
        free = solve_sempc(p)
        p = p.replace(M=0.95 * free.ees_value)
        sol = solve_sempc(p)
        c = p.cons

        def f(U, p=p, c=c):
            return sempc_objective_direct(p.system.A, p.system.Bu, p.system.Bd, p.x0, p.demands,
                                          p.scenarios, p.k, p.M, p.R, p.u_prev, c.x_lo, c.x_hi,
                                          c.Omega, c.kappa, c.x_s, p.terminal_weight, U)

        best = zoom_grid_minimize(f, np.tile(c.u_lo, p.N), np.tile(c.u_hi, p.N))
        if sol.status != "optimal" or not np.isfinite(best):
            bad += (sol.status == "optimal") != np.isfinite(best)
            continue
        worst = max(worst, abs(sol.objective - best))
    ok = bad == 0 and worst <= 1e-3
    assert _report(6, ok, f"10 instances, worst |objective - grid| = {worst:.2e}")


@pytest.fixture(scope="module")
def capped_run():
    cfg = load_config(LOOP["config"])
    start = time.perf_counter()
    trace = closed_loop(cfg, LOOP["N"], LOOP["N_s"], LOOP["k"], LOOP["M"], LOOP["T"],
                        seed=LOOP["seed"], shadow_uncapped=True)
    return trace, time.perf_counter() - start


def test_criterion_7_closed_loop_cap(capped_run):
    trace, elapsed = capped_run
    M = LOOP["M"]
    opt = [r for r in trace.records if r.status == "optimal"]
    cap_gap = max(r.ees_value - M for r in opt)
    # uncapped problem solved from the same state with the same scenarios
    shadow = min(r.objective - r.objective_uncapped for r in opt)
    active = sum(r.ees_value >= M - 1e-3 for r in opt)
    ok = cap_gap <= 1e-6 and shadow >= -1e-6 and elapsed < 300
    # a separate M = inf run follows its own trajectory; reported for information only
    free = closed_loop(load_config(LOOP["config"]), LOOP["N"], LOOP["N_s"], LOOP["k"], math.inf,
                       LOOP["T"], seed=LOOP["seed"])
    both = [(a, b) for a, b in zip(trace.records, free.records)
            if a.status == b.status == "optimal"]
    literal = sum(b.objective <= a.objective + 1e-6 for a, b in both)
    detail = (f"{len(opt)}/{LOOP['T']} optimal, {active} with active cap, "
              f"{sum(r.softened for r in trace.records)} softened, max EES-M={cap_gap:.1e}, "
              f"min capped-uncapped objective at the same state={shadow:.1e}, {elapsed:.1f}s; "
              f"separate uncapped run lower at {literal}/{len(both)} steps (informational)")
    assert _report(7, ok, detail)


@pytest.mark.slow
def test_criterion_8_certificates():
    cfg = load_config(LOOP["config"])
    N_T = required_test_samples(TestSizeQuery(1e-2, 5e-3, 1e-3))
    opts = CertifyOptions(beta=1e-6, N_r=3000, N_T=N_T, mu=1e-2, rho=5e-3)
    trace = closed_loop(cfg, LOOP["N"], 500, LOOP["k"], LOOP["M"], LOOP["T"], seed=LOOP["seed"],
                        certify=opts)
    certified = [r for r in trace.records if r.eps_hi is not None]
    eps = np.array([r.eps_hi for r in certified])
    s = np.array([r.s_P for r in certified])
    order = np.argsort(s, kind="stable")
    in_range = bool(np.all(np.isfinite(eps)) and np.all((eps > 0) & (eps < 1)))
    steps = np.diff(eps[order])
    ds = np.diff(s[order])
    monotone = bool(np.all(steps[ds > 0] > 0) and np.all(np.abs(steps[ds == 0]) <= 1e-15))
    ok = len(certified) == LOOP["T"] and in_range and monotone
    detail = (f"{len(certified)} steps certified, s* in [{s.min()}, {s.max()}], "
              f"eps_hi in [{eps.min():.3f}, {eps.max():.3f}], monotone={monotone}")
    assert _report(8, ok, detail)


def test_criterion_9_determinism(tmp_path, capsys):
    argv = ["run", "--config", LOOP["config"], "--N", str(LOOP["N"]), "--Ns", str(LOOP["N_s"]),
            "--k", str(LOOP["k"]), "--ees-cap", str(LOOP["M"]), "--T", str(LOOP["T"]),
            "--seed", str(LOOP["seed"])]
    codes = [main(argv + ["--out", str(tmp_path / f"run{i}.csv")]) for i in range(2)]
    capsys.readouterr()
    a = (tmp_path / "run0.csv").read_bytes()
    b = (tmp_path / "run1.csv").read_bytes()
    meta = [json.loads((tmp_path / f"run{i}.json").read_text())["config_hash"] for i in range(2)]
    ok = codes == [0, 0] and a == b and meta[0] == meta[1]
    assert _report(9, ok, f"two runs, {len(a)} bytes each, identical={a == b}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
