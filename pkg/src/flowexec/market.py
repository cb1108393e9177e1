"""Heston price/variance dynamics with concave impact: pricing, accounting, path simulation.

Price follows a log-Euler step with the permanent impact in the drift; variance
follows a Milstein step with full truncation at zero. Execution prices carry a
power-law temporary impact. All randomness comes from per-path Philox streams,
so a path depends only on (params, rule, seed) and never on batch size.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from .errors import NonFiniteState
from .rng import path_rng, STREAM_MARKET

# Permanent-impact placement in the price update.
LOG_DRIFT = "log_drift"    # -eta*nu inside the log-price drift (default)
POST_STEP = "post_step"    # eta*nu subtracted from the price level after the step

V_FLOOR = 1e-12


@dataclass(frozen=True)
class MarketParams:
    """Dynamics, impact and preference constants for one scenario."""

    mu: float = 0.0            # drift rate per year
    kappa: float = 2.0         # variance mean-reversion speed per year
    theta: float = 0.09        # long-run variance
    xi: float = 0.3            # volatility of variance
    rho: float = -0.7          # price-variance correlation
    eta: float = 2.5e-5        # permanent impact coefficient
    epsilon: float = 5e-5      # temporary impact coefficient
    beta: float = 0.5          # impact exponent in (0, 1]
    lam: float = 1e-5          # risk aversion applied to Var[IS]
    S0: float = 100.0          # initial price
    V0: float = 0.09           # initial variance
    X0: float = 10_000.0       # initial shares
    T: float = 1.0             # horizon in years
    N: int = 100               # number of steps
    perm_impact_mode: str = LOG_DRIFT

    def __post_init__(self):
        if not (self.kappa > 0):
            raise ValueError("kappa must be > 0")
        if not (self.theta > 0):
            raise ValueError("theta must be > 0")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")
        if self.epsilon < 0 or self.eta < 0:
            raise ValueError("impact coefficients must be >= 0")
        if not (0 < self.beta <= 1):
            raise ValueError("beta must be in (0, 1]")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not (self.X0 > 0 and self.S0 > 0):
            raise ValueError("X0 and S0 must be > 0")
        if self.V0 < 0:
            raise ValueError("V0 must be >= 0")
        if not (self.T > 0):
            raise ValueError("T must be > 0")
        if self.perm_impact_mode not in (LOG_DRIFT, POST_STEP):
            raise ValueError(f"unknown perm_impact_mode {self.perm_impact_mode!r}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MarketParams":
        return cls(**d)

    def with_overrides(self, **kwargs) -> "MarketParams":
        return replace(self, **kwargs)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "MarketParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class PathState:
    """Market state at one decision time."""

    t: float
    S: float
    V: float
    q: float
    C: float


@dataclass
class Trajectory:
    """Per-step record of one simulated liquidation.

    q holds the post-trade inventory after step k (so q[-1] == 0 for a
    complete liquidation) and cash the post-fill cash C_{k+1}.
    """

    params: MarketParams
    seed: int
    t: np.ndarray
    S: np.ndarray
    V: np.ndarray
    q: np.ndarray
    x: np.ndarray
    nu: np.ndarray
    exec_price: np.ndarray
    cash: np.ndarray
    shortfall: float


@dataclass
class PathBatch:
    """Vectorized trajectories for a batch of seeds; arrays are (n_paths, N)."""

    params: MarketParams
    seeds: np.ndarray
    shortfall: np.ndarray
    t: np.ndarray | None = None
    S: np.ndarray | None = None
    V: np.ndarray | None = None
    q: np.ndarray | None = None
    x: np.ndarray | None = None
    nu: np.ndarray | None = None
    exec_price: np.ndarray | None = None
    cash: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.seeds)

    def trajectory(self, i: int) -> Trajectory:
        if self.S is None:
            raise ValueError("batch was simulated without record=True")
        return Trajectory(
            params=self.params,
            seed=int(self.seeds[i]),
            t=self.t.copy(),
            S=self.S[i].copy(),
            V=self.V[i].copy(),
            q=self.q[i].copy(),
            x=self.x[i].copy(),
            nu=self.nu[i].copy(),
            exec_price=self.exec_price[i].copy(),
            cash=self.cash[i].copy(),
            shortfall=float(self.shortfall[i]),
        )


def correlated_normals(rng: np.random.Generator, rho: float, size=None):
    """Draw (z1, zv) standard normals with corr(z1, zv) = rho.

    zv = rho*z1 + sqrt(1 - rho^2)*z2 with z1, z2 independent N(0, 1).
    """
    z1 = rng.standard_normal(size)
    z2 = rng.standard_normal(size)
    zv = rho * z1 + math.sqrt(max(0.0, 1.0 - rho * rho)) * z2
    return z1, zv


def step_variance(V, dt, zv, p: MarketParams):
    """One Milstein variance step, truncated at zero."""
    root = np.sqrt(V * dt)
    V_next = (
        V
        + p.kappa * (p.theta - V) * dt
        + p.xi * root * zv
        + 0.25 * p.xi * p.xi * dt * (zv * zv - 1.0)
    )
    return np.maximum(V_next, 0.0)


def step_price(S, V, nu, dt, z1, p: MarketParams):
    """One log-price step at trading rate nu."""
    if p.perm_impact_mode == LOG_DRIFT:
        dlog = (p.mu - 0.5 * V - p.eta * nu) * dt + np.sqrt(V * dt) * z1
        return S * np.exp(dlog)
    # Level subtraction after the exponential step.
    dlog = (p.mu - 0.5 * V) * dt + np.sqrt(V * dt) * z1
    return S * np.exp(dlog) - p.eta * nu


def execution_price(S, nu, p: MarketParams):
    """Fill price: mid less the power-law temporary impact."""
    return S - p.epsilon * np.power(nu, p.beta)


class ScheduleRule:
    """Trading rule driven by a precomputed share schedule."""

    def __init__(self, shares: np.ndarray):
        self.shares = np.asarray(shares, dtype=float)

    def shares_for_step(self, k, t, S, V, q, p: MarketParams):
        return np.full_like(q, self.shares[k])


def simulate_paths(p: MarketParams, rule, seeds, record: bool = False) -> PathBatch:
    """Simulate one path per seed under a trading rule.

    The rule exposes shares_for_step(k, t, S, V, q, p) -> shares (vectorized
    over paths) and optionally begin(seeds, p) for per-path policy noise.
    Shares are clipped into [0, q] and the final step always liquidates the
    remainder, so q_N = 0 for every run.
    """
    seeds = np.asarray(list(seeds), dtype=np.uint64)
    n = len(seeds)
    N, dt = p.N, p.dt

    noise = np.empty((n, N, 2))
    for i in range(n):
        noise[i] = path_rng(int(seeds[i]), STREAM_MARKET).standard_normal((N, 2))
    z1 = noise[:, :, 0]
    zv = p.rho * z1 + math.sqrt(max(0.0, 1.0 - p.rho * p.rho)) * noise[:, :, 1]

    begin = getattr(rule, "begin", None)
    if begin is not None:
        begin(seeds, p)

    S = np.full(n, p.S0, dtype=float)
    V = np.full(n, p.V0, dtype=float)
    q = np.full(n, p.X0, dtype=float)
    C = np.zeros(n, dtype=float)

    if record:
        rec = {name: np.empty((n, N)) for name in ("S", "V", "q", "x", "nu", "exec_price", "cash")}
        t_grid = np.arange(N) * dt

    for k in range(N):
        t = k * dt
        x = np.asarray(rule.shares_for_step(k, t, S, V, q, p), dtype=float)
        x = np.clip(x, 0.0, q)
        if k == N - 1:
            x = q.copy()
        nu = x / dt
        s_exec = execution_price(S, nu, p)
        C = C + x * s_exec
        q_next = q - x

        if record:
            rec["S"][:, k] = S
            rec["V"][:, k] = V
            rec["q"][:, k] = q_next
            rec["x"][:, k] = x
            rec["nu"][:, k] = nu
            rec["exec_price"][:, k] = s_exec
            rec["cash"][:, k] = C

        S = step_price(S, V, nu, dt, z1[:, k], p)
        V = step_variance(V, dt, zv[:, k], p)
        q = q_next

        bad = ~(np.isfinite(S) & np.isfinite(V) & np.isfinite(C))
        if bad.any():
            i = int(np.argmax(bad))
            raise NonFiniteState(
                f"non-finite state at step {k + 1} (path seed {int(seeds[i])}): "
                f"S={S[i]!r} V={V[i]!r} C={C[i]!r}"
            )

    shortfall = p.X0 * p.S0 - C
    batch = PathBatch(params=p, seeds=seeds, shortfall=shortfall)
    if record:
        batch.t = t_grid
        for name, arr in rec.items():
            setattr(batch, name, arr)
    return batch


def simulate_path(p: MarketParams, rule, seed: int) -> Trajectory:
    """Single-path convenience wrapper; bit-identical to the batched run."""
    return simulate_paths(p, rule, [seed], record=True).trajectory(0)


def implementation_shortfall(traj: Trajectory) -> float:
    """Ideal value of the block at the arrival price minus actual proceeds."""
    return traj.params.X0 * traj.params.S0 - float(traj.cash[-1])


TRAJECTORY_CSV_HEADER = ["k", "t", "S", "V", "q", "x", "nu", "exec_price", "cash"]


def trajectory_to_csv(traj: Trajectory, path, extra_columns: dict | None = None) -> None:
    """Write one trajectory as CSV; extra_columns maps name -> length-N array."""
    extra = extra_columns or {}
    header = TRAJECTORY_CSV_HEADER + list(extra.keys())
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for k in range(len(traj.t)):
            row = [
                k,
                repr(float(traj.t[k])),
                repr(float(traj.S[k])),
                repr(float(traj.V[k])),
                repr(float(traj.q[k])),
                repr(float(traj.x[k])),
                repr(float(traj.nu[k])),
                repr(float(traj.exec_price[k])),
                repr(float(traj.cash[k])),
            ]
            row += [repr(float(extra[name][k])) for name in extra]
            w.writerow(row)
