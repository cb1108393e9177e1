"""Episodic liquidation environment: fraction actions, shaped rewards, forced terminal fill.

The per-step price update here subtracts the permanent impact from the price
level after the exponential step, and the fill price charges half the
permanent impact of the step's own shares; the benchmark simulator in
market.py instead keeps the permanent impact inside the log drift. Both forms
are kept as-is on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EpisodeFinished
from .market import MarketParams, V_FLOOR, trajectory_to_csv, Trajectory
from .rng import path_rng, STREAM_MARKET

INVENTORY_EPS = 1e-6


@dataclass(frozen=True)
class EnvConfig:
    market: MarketParams
    lambda_risk: float = 1e-8   # running inventory-risk weight
    phi: float = 10.0           # terminal leftover-inventory penalty weight

    def __post_init__(self):
        if self.lambda_risk < 0 or self.phi < 0:
            raise ValueError("lambda_risk and phi must be >= 0")


@dataclass(frozen=True)
class Observation:
    """Normalized state tuple (time left, inventory ratio, log price, log vol)."""

    time_left_frac: float
    inv_frac: float
    log_price: float
    log_vol: float

    def as_array(self) -> np.ndarray:
        return np.array([self.time_left_frac, self.inv_frac, self.log_price, self.log_vol])


@dataclass
class StepResult:
    obs: Observation
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def normalize_obs(t, q, S, V, p: MarketParams):
    """Vectorized observation features; V is floored before the log."""
    t = np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float)
    S = np.maximum(np.asarray(S, dtype=float), V_FLOOR)
    V = np.maximum(np.asarray(V, dtype=float), V_FLOOR)
    return np.stack(
        [(p.T - t) / p.T, q / p.X0, np.log(S), np.log(np.sqrt(V))],
        axis=-1,
    )


class ExecutionEnv:
    """Single-episode mutable environment; many instances may run in parallel."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.p = cfg.market
        self._rng = None
        self.done = True
        self._trace = []

    # -- state ---------------------------------------------------------------

    def observation(self) -> Observation:
        feats = normalize_obs(self.t, self.q, self.S, self.V, self.p)
        return Observation(*[float(v) for v in feats])

    def reset(self, seed: int) -> Observation:
        self._rng = path_rng(int(seed), STREAM_MARKET)
        self.seed = int(seed)
        self.k = 0
        self.t = 0.0
        self.q = self.p.X0
        self.S = self.p.S0
        self.V = self.p.V0
        self.C = 0.0
        self.done = False
        self.clamp_count = 0
        self._trace = []
        return self._observation()

    def step(self, a: float) -> StepResult:
        if self.done:
            raise EpisodeFinished("episode already done; call reset()")
        p, cfg = self.p, self.cfg
        dt = p.dt

        a_in = float(a)
        a_clamped = min(max(a_in, 0.0), 1.0)
        clamped = a_clamped != a_in
        if clamped:
            self.clamp_count += 1
        if self.k == p.N - 1:
            a_clamped = 1.0  # force full liquidation in the last step

        shares = a_clamped * self.q
        nu = shares / dt
        temp = p.epsilon * nu ** p.beta
        perm = p.eta * nu
        p_exec = self.S - temp - 0.5 * p.eta * shares
        cost = temp * shares + 0.5 * p.eta * shares * shares
        self.C += p_exec * shares
        q_next = self.q - shares

        z1, z2 = self._rng.standard_normal(2)
        w_v = p.rho * z1 + math.sqrt(max(0.0, 1.0 - p.rho * p.rho)) * z2
        dV = (
            p.kappa * (p.theta - self.V) * dt
            + p.xi * math.sqrt(self.V * dt) * w_v
            + 0.25 * p.xi * p.xi * dt * (w_v * w_v - 1.0)
        )
        V_next = max(0.0, self.V + dV)
        dlogS = (p.mu - 0.5 * self.V) * dt + math.sqrt(self.V * dt) * z1
        S_next = self.S * math.exp(dlogS) - perm

        self.k += 1
        self.t = self.k * dt
        done = (self.k >= p.N) or (q_next <= INVENTORY_EPS)

        hold = -cfg.lambda_risk * q_next * q_next * V_next * dt
        reward = -cost / (p.X0 * p.S0) * 100.0 + hold
        if done and q_next > 0.0:
            reward -= cfg.phi * q_next / p.X0

        self._trace.append(
            (self.t - dt, self.S, self.V, q_next, shares, nu, p_exec, self.C, reward)
        )
        self.q = q_next
        self.S = S_next
        self.V = V_next
        self.done = done

        obs = self._observation()
        info = {"exec_price": p_exec, "cost": cost, "shares": shares, "clamped": clamped,
                "cash": self.C, "inventory": self.q}
        return StepResult(obs=obs, reward=reward, done=done, info=info)

    # -- reporting -----------------------------------------------------------

    def implementation_shortfall(self) -> float:
        return self.p.X0 * self.p.S0 - self.C

    def trace_to_csv(self, path) -> None:
        """Episode trace in the market trajectory schema plus a reward column."""
        cols = np.array(self._trace, dtype=float)
        traj = Trajectory(
            params=self.p, seed=self.seed,
            t=cols[:, 0], S=cols[:, 1], V=cols[:, 2], q=cols[:, 3], x=cols[:, 4],
            nu=cols[:, 5], exec_price=cols[:, 6], cash=cols[:, 7],
            shortfall=self.implementation_shortfall(),
        )
        trajectory_to_csv(traj, path, extra_columns={"reward": cols[:, 8]})
