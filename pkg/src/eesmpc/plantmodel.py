"""Linear tank-network models, constraint sets, demand and tariff profiles.

A network config is a JSON object with keys ``A, Bu, Bd, x_lo, x_hi, u_lo,
u_hi, Omega, kappa, x_s`` (a vector or ``"midpoint"``), ``demand_multiplier``
(24 values), ``d_bar`` and ``tariff`` (``low, high, switch_hour,
noise_width``). Optional keys: ``x0``, ``R``, ``terminal_weight``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, ParameterError

BUNDLED_CONFIGS = ("one_tank", "three_tank", "richmond_like")


def _matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} has non-finite entries")
    return arr


def _vector(value, name: str, size: int | None = None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float)).ravel()
    if size is not None and arr.size != size:
        raise DimensionError(f"{name} has length {arr.size}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class LinearSystem:
    A: np.ndarray
    Bu: np.ndarray
    Bd: np.ndarray

    def __post_init__(self):
        A = _matrix(self.A, "A")
        Bu = _matrix(self.Bu, "Bu")
        Bd = _matrix(self.Bd, "Bd")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if Bu.shape[0] != n or Bd.shape[0] != n:
            raise DimensionError("Bu and Bd must have as many rows as A")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Bu", Bu)
        object.__setattr__(self, "Bd", Bd)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.Bu.shape[1]

    @property
    def v(self) -> int:
        return self.Bd.shape[1]


@dataclass(frozen=True)
class ConstraintSets:
    x_lo: np.ndarray
    x_hi: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    Omega: np.ndarray
    kappa: float
    x_s: np.ndarray

    def __post_init__(self):
        x_lo = _vector(self.x_lo, "x_lo")
        x_hi = _vector(self.x_hi, "x_hi", x_lo.size)
        u_lo = _vector(self.u_lo, "u_lo")
        u_hi = _vector(self.u_hi, "u_hi", u_lo.size)
        if np.any(x_lo >= x_hi):
            raise ParameterError("x_lo must be below x_hi elementwise")
        if np.any(u_lo >= u_hi):
            raise ParameterError("u_lo must be below u_hi elementwise")
        Omega = _matrix(self.Omega, "Omega")
        if Omega.shape != (x_lo.size, x_lo.size):
            raise DimensionError(f"Omega must be {x_lo.size}x{x_lo.size}")
        if not np.allclose(Omega, Omega.T):
            raise ParameterError("Omega must be symmetric")
        try:
            np.linalg.cholesky(Omega)
        except np.linalg.LinAlgError:
            raise ParameterError("Omega must be positive definite") from None
        if not self.kappa > 0:
            raise ParameterError("kappa must be positive")
        x_s = _vector(self.x_s, "x_s", x_lo.size)
        for name, val in (("x_lo", x_lo), ("x_hi", x_hi), ("u_lo", u_lo), ("u_hi", u_hi),
                          ("Omega", Omega), ("x_s", x_s)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "kappa", float(self.kappa))

    def omega_sqrt(self) -> np.ndarray:
        """Symmetric square root of ``Omega``."""
        w, V = np.linalg.eigh(self.Omega)
        return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class DemandProfile:
    multiplier: np.ndarray
    d_bar: np.ndarray

    def __post_init__(self):
        mult = _vector(self.multiplier, "multiplier")
        mean = mult.mean()
        if not mean > 0:
            raise ParameterError("demand multiplier must have a positive mean")
        object.__setattr__(self, "multiplier", mult / mean)
        object.__setattr__(self, "d_bar", _vector(self.d_bar, "d_bar"))

    @property
    def period(self) -> int:
        return self.multiplier.size

    def demands(self, start: int, steps: int) -> np.ndarray:
        """Demand vectors for hours ``start .. start+steps-1``, shape ``(steps, v)``."""
        hours = (start + np.arange(steps)) % self.period
        return self.multiplier[hours, None] * self.d_bar[None, :]


@dataclass(frozen=True)
class TariffModel:
    """Two-level hourly tariff plus i.i.d. ``Uniform(0, noise_width)`` noise.

    Hours ``0 .. switch_hour-1`` use ``low``; the rest of the day uses ``high``.
    """

    low: float = 1.0
    high: float = 2.0
    switch_hour: int = 7
    noise_width: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (self.low > 0 and self.high > 0):
            raise ParameterError("tariff levels must be positive")
        if self.noise_width < 0:
            raise ParameterError("noise_width must be non-negative")
        if not 0 <= self.switch_hour <= 24:
            raise ParameterError("switch_hour must lie in [0, 24]")

    @property
    def deterministic(self) -> np.ndarray:
        hours = np.arange(24)
        return np.where(hours < self.switch_hour, self.low, self.high).astype(float)

    def base_prices(self, start: int, steps: int, m: int) -> np.ndarray:
        """Noise-free price vector ``(steps*m,)`` starting at hour ``start``."""
        hours = (start + np.arange(steps)) % 24
        return np.repeat(self.deterministic[hours], m)


@dataclass(frozen=True)
class FeasibleSet:
    """Condensed input-space form of the MPC constraints.

    ``u`` is feasible iff ``u_lo <= u <= u_hi``, ``Bbar @ u <= Abar`` and
    ``(Bhat @ u + gamma)' Omega (Bhat @ u + gamma) <= kappa``.
    """

    Abar: np.ndarray
    Bbar: np.ndarray
    Bhat: np.ndarray
    gamma: np.ndarray
    Omega: np.ndarray
    kappa: float
    u_lo: np.ndarray
    u_hi: np.ndarray

    @property
    def dim(self) -> int:
        return self.u_lo.size

    def contains(self, u, tol: float = 1e-9) -> np.ndarray:
        """Membership test for one point ``(d,)`` (returns bool) or a batch ``(s, d)``."""
        U = np.atleast_2d(np.asarray(u, dtype=float))
        if U.shape[1] != self.dim:
            raise DimensionError(f"expected inputs of length {self.dim}")
        ok = np.all((U >= self.u_lo - tol) & (U <= self.u_hi + tol), axis=1)
        if self.Bbar.shape[0]:
            ok &= np.all(U @ self.Bbar.T <= self.Abar + tol, axis=1)
        if self.Bhat.shape[0]:
            e = U @ self.Bhat.T + self.gamma
            ok &= np.einsum("si,ij,sj->s", e, self.Omega, e) <= self.kappa + tol
        return ok if np.ndim(u) > 1 else bool(ok[0])

    def terminal_soc(self):
        """Terminal ellipsoid as ``(F, g, radius)`` with ``||F u + g|| <= radius``."""
        w, V = np.linalg.eigh(self.Omega)
        root = (V * np.sqrt(w)) @ V.T
        return root @ self.Bhat, root @ self.gamma, float(np.sqrt(self.kappa))

    def restricted(self, Bbar_extra, Abar_extra) -> "FeasibleSet":
        """Copy with extra linear rows ``Bbar_extra @ u <= Abar_extra``."""
        return FeasibleSet(np.concatenate((self.Abar, np.ravel(Abar_extra))),
                           np.vstack((self.Bbar, np.atleast_2d(Bbar_extra))),
                           self.Bhat, self.gamma, self.Omega, self.kappa, self.u_lo, self.u_hi)


def simulate(sys: LinearSystem, x0, inputs, demands) -> np.ndarray:
    """State trajectory ``(N+1, n)`` of ``x+ = A x + Bu u + Bd d``."""
    x = _vector(x0, "x0", sys.n)
    U = np.asarray(inputs, dtype=float).reshape(-1, sys.m) if np.size(inputs) else np.empty((0, sys.m))
    D = np.asarray(demands, dtype=float).reshape(-1, sys.v) if np.size(demands) else np.empty((0, sys.v))
    if U.shape[0] != D.shape[0]:
        raise DimensionError(f"{U.shape[0]} input steps but {D.shape[0]} demand steps")
    traj = np.empty((U.shape[0] + 1, sys.n))
    traj[0] = x
    for k in range(U.shape[0]):
        x = sys.A @ x + sys.Bu @ U[k] + sys.Bd @ D[k]
        traj[k + 1] = x
    return traj


def prediction_matrices(sys: LinearSystem, x0, demands, N: int):
    """``X = free + Gamma @ u`` for stacked states ``x_1 .. x_N``.

    Returns ``(free, Gamma)`` with shapes ``(N, n)`` and ``(N*n, N*m)``.
    """
    n, m = sys.n, sys.m
    x = _vector(x0, "x0", n)
    D = np.asarray(demands, dtype=float).reshape(-1, sys.v)
    if D.shape[0] < N:
        raise DimensionError(f"need {N} demand steps, got {D.shape[0]}")
    free = np.empty((N, n))
    Gamma = np.zeros((N * n, N * m))
    for l in range(N):
        x = sys.A @ x + sys.Bd @ D[l]
        free[l] = x
    # block (l, i) = A^(l-i) Bu for i <= l
    powers = [sys.Bu]
    for _ in range(1, N):
        powers.append(sys.A @ powers[-1])
    for l in range(N):
        for i in range(l + 1):
            Gamma[l * n:(l + 1) * n, i * m:(i + 1) * m] = powers[l - i]
    return free, Gamma


def condense(sys: LinearSystem, cons: ConstraintSets, x0, demands, N: int) -> FeasibleSet:
    """Express state boxes for steps ``1..N-1`` and the terminal ellipsoid on ``u``."""
    if N < 1:
        raise ParameterError("horizon N must be >= 1")
    if cons.x_lo.size != sys.n or cons.u_lo.size != sys.m:
        raise DimensionError("constraint sets do not match system dimensions")
    n = sys.n
    free, Gamma = prediction_matrices(sys, x0, demands, N)
    inner = Gamma[: (N - 1) * n]
    inner_free = free[: N - 1].ravel()
    x_hi = np.tile(cons.x_hi, N - 1)
    x_lo = np.tile(cons.x_lo, N - 1)
    Bbar = np.vstack((inner, -inner))
    Abar = np.concatenate((x_hi - inner_free, inner_free - x_lo))
    Bhat = Gamma[(N - 1) * n:]
    gamma = free[N - 1] - cons.x_s
    return FeasibleSet(
        Abar=Abar, Bbar=Bbar, Bhat=Bhat, gamma=gamma,
        Omega=cons.Omega, kappa=cons.kappa,
        u_lo=np.tile(cons.u_lo, N), u_hi=np.tile(cons.u_hi, N),
    )


def draw_scenarios(tariff: TariffModel, N: int, m: int, count: int, rng=None,
                   start_hour: int = 0) -> np.ndarray:
    """``count`` price scenarios, shape ``(count, N*m)``.

    Entry ``(l, j)`` is the base price of hour ``start_hour + l`` plus an
    independent ``Uniform(0, noise_width)`` draw. ``rng`` is a numpy
    ``Generator`` or seed; ``None`` uses ``tariff.seed``.
    """
    if count < 1:
        raise ParameterError("count must be >= 1")
    if rng is None:
        rng = tariff.seed
    rng = np.random.default_rng(rng)
    base = tariff.base_prices(start_hour, N, m)
    noise = rng.uniform(0.0, 1.0, size=(count, N * m)) * tariff.noise_width
    return base[None, :] + noise


def loss(scenario, u_tilde) -> float:
    """Energy cost of one price scenario at input sequence ``u_tilde``."""
    a = np.asarray(scenario, dtype=float).ravel()
    u = np.asarray(u_tilde, dtype=float).ravel()
    if a.size != u.size:
        raise DimensionError(f"scenario length {a.size} != input length {u.size}")
    return float(a @ u)


def losses(scenarios, u_tilde) -> np.ndarray:
    """Energy cost of every scenario, shape ``(N_s,)``."""
    S = np.atleast_2d(np.asarray(scenarios, dtype=float))
    u = np.asarray(u_tilde, dtype=float).ravel()
    if S.shape[1] != u.size:
        raise DimensionError(f"scenario length {S.shape[1]} != input length {u.size}")
    return S @ u


# ---------------------------------------------------------------------------
# configuration files

@dataclass(frozen=True)
class NetworkConfig:
    system: LinearSystem
    cons: ConstraintSets
    demand: DemandProfile
    tariff: TariffModel
    x0: np.ndarray
    R: np.ndarray
    terminal_weight: float = 0.0
    raw: dict = field(default_factory=dict, compare=False)


def load_config(source) -> NetworkConfig:
    """Load a network config from a path, a bundled name, or a dict."""
    if isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        if text in BUNDLED_CONFIGS:
            raw = json.loads(resources.files("eesmpc.data").joinpath(f"{text}.json").read_text())
        else:
            path = Path(text)
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            raw = json.loads(path.read_text())
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> NetworkConfig:
    required = ["A", "Bu", "Bd", "x_lo", "x_hi", "u_lo", "u_hi", "Omega", "kappa",
                "demand_multiplier", "d_bar", "tariff"]
    missing = [key for key in required if key not in raw]
    if missing:
        raise ParameterError(f"config missing keys: {', '.join(missing)}")
    system = LinearSystem(raw["A"], raw["Bu"], raw["Bd"])
    x_lo = _vector(raw["x_lo"], "x_lo", system.n)
    x_hi = _vector(raw["x_hi"], "x_hi", system.n)
    x_s = raw.get("x_s", "midpoint")
    if isinstance(x_s, str):
        if x_s != "midpoint":
            raise ParameterError(f"unknown x_s setting {x_s!r}")
        x_s = 0.5 * (x_lo + x_hi)
    cons = ConstraintSets(x_lo, x_hi, raw["u_lo"], raw["u_hi"], raw["Omega"], raw["kappa"], x_s)
    if cons.u_lo.size != system.m:
        raise DimensionError("u bounds do not match Bu columns")
    demand = DemandProfile(raw["demand_multiplier"], raw["d_bar"])
    if demand.d_bar.size != system.v:
        raise DimensionError("d_bar does not match Bd columns")
    t = raw["tariff"]
    tariff = TariffModel(float(t.get("low", 1.0)), float(t.get("high", 2.0)),
                         int(t.get("switch_hour", 7)), float(t.get("noise_width", 1.0)),
                         int(t.get("seed", 0)))
    x0 = _vector(raw.get("x0", cons.x_s), "x0", system.n)
    R = _matrix(raw.get("R", np.zeros((system.m, system.m))), "R")
    if R.shape != (system.m, system.m):
        raise DimensionError("R must be m x m")
    return NetworkConfig(system, cons, demand, tariff, x0, R,
                         float(raw.get("terminal_weight", 0.0)), raw)


def scenario_header(N: int, m: int) -> list[str]:
    return [f"a_{l}_{j}" for l in range(N) for j in range(m)]


def write_scenarios_csv(path, scenarios: np.ndarray, N: int, m: int) -> None:
    S = np.atleast_2d(scenarios)
    if S.shape[1] != N * m:
        raise DimensionError("scenario width does not match N*m")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(scenario_header(N, m))
        for row in S:
            writer.writerow([f"{x:.12g}" for x in row])


def read_scenarios_csv(path) -> tuple[np.ndarray, int, int]:
    """Read a scenario CSV; returns ``(scenarios, N, m)`` parsed from the header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in row] for row in reader if row]
    try:
        pairs = [tuple(int(p) for p in name.split("_")[1:]) for name in header]
    except ValueError:
        raise ParameterError("scenario header must use a_<l>_<j> names") from None
    N = max(p[0] for p in pairs) + 1
    m = max(p[1] for p in pairs) + 1
    if len(header) != N * m:
        raise DimensionError("scenario header is not a full N x m grid")
    return np.asarray(rows, dtype=float).reshape(-1, N * m), N, m
