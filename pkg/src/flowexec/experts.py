"""Benchmark execution strategies: share schedules and state-feedback trading rates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BlowUp
from .market import MarketParams, ScheduleRule, V_FLOOR

STRATEGY_NAMES = (
    "twap",
    "vwap",
    "ac_approx",
    "heston_optimal",
    "state_dependent",
    "lq_ac",
    "shortcut",
    "ppo",
)

RICCATI_CAP = 1e12


@dataclass(frozen=True)
class Schedule:
    """Non-negative per-step share amounts summing to the initial inventory."""

    shares: np.ndarray

    def rule(self) -> ScheduleRule:
        return ScheduleRule(self.shares)


def _close_sum(shares: np.ndarray, total: float) -> np.ndarray:
    # Absorb float rounding into the final entry so the schedule sums exactly.
    shares = shares.astype(float).copy()
    shares[-1] = total - shares[:-1].sum()
    return shares


def twap_schedule(p: MarketParams) -> Schedule:
    """Uniform liquidation: X0/N shares every step."""
    shares = np.full(p.N, p.X0 / p.N)
    return Schedule(_close_sum(shares, p.X0))


def vwap_schedule(p: MarketParams) -> Schedule:
    """U-shaped volume-curve liquidation with quadratic weights."""
    k = np.arange(p.N)
    w = 2.5 * (k / p.N - 0.5) ** 2 + 0.5
    w = w / w.sum()
    return Schedule(_close_sum(p.X0 * w, p.X0))


def ac_approx_kappa(p: MarketParams) -> float:
    """Decay rate of the linearized risk-cost trade-off schedule."""
    eps_eff = p.epsilon * (p.X0 / p.T) ** (p.beta - 1.0)
    return math.sqrt(p.lam * p.theta / eps_eff)


def ac_approx_schedule(p: MarketParams) -> Schedule:
    """Sinh inventory profile using an effective linear temporary-impact coefficient.

    Falls back to TWAP when the decay rate is degenerate (kappa_ac*T < 1e-6).
    """
    kac = ac_approx_kappa(p)
    if kac * p.T < 1e-6:
        return twap_schedule(p)
    t = np.arange(p.N + 1) * p.dt
    q = p.X0 * np.sinh(kac * (p.T - t)) / math.sinh(kac * p.T)
    shares = q[:-1] - q[1:]
    return Schedule(_close_sum(shares, p.X0))


def expected_variance(V, tau, p: MarketParams):
    """Mean-reverting conditional expectation of variance tau years ahead."""
    return p.theta + (V - p.theta) * np.exp(-p.kappa * tau)


def heston_optimal_rate(t, q, V, p: MarketParams):
    """Trading rate adapting to stochastic volatility and concave impact.

    Quartic-root adjustment of the base rate (1+beta)*q/(T-t) by the ratio of
    expected terminal variance to current variance; blends into uniform
    liquidation of the remainder over the last 5% of the horizon.
    """
    tau = p.T - np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float)
    Vf = np.maximum(np.asarray(V, dtype=float), V_FLOOR)
    ratio = expected_variance(Vf, tau, p) / Vf
    nu = (1.0 + p.beta) * q / tau * np.power(ratio, 0.25)
    alpha = tau / (0.05 * p.T)
    smoothed = alpha * nu + (1.0 - alpha) * q / tau
    return np.where(tau < 0.05 * p.T, smoothed, nu)


def state_dependent_rate(t, q, V, p: MarketParams):
    """Base power-law rate times a volatility adjustment and an urgency cap."""
    tau = p.T - np.asarray(t, dtype=float)
    q = np.asarray(q, dtype=float)
    Vf = np.maximum(np.asarray(V, dtype=float), V_FLOOR)
    base = np.power(q / tau, 1.0 / (1.0 + p.beta))
    vol_adj = np.sqrt(expected_variance(Vf, tau, p) / Vf)
    urgency = np.minimum(2.0, 1.0 / tau)
    return base * vol_adj * urgency


class RateRule:
    """Adapts a rate function nu(t, q, S, V) to per-step share amounts."""

    def __init__(self, rate_fn):
        self.rate_fn = rate_fn

    def shares_for_step(self, k, t, S, V, q, p: MarketParams):
        nu = self.rate_fn(t, q, S, V, p)
        return np.minimum(q, np.maximum(nu, 0.0) * p.dt)


def heston_optimal_rule() -> RateRule:
    return RateRule(lambda t, q, S, V, p: heston_optimal_rate(t, q, V, p))


def state_dependent_rule() -> RateRule:
    return RateRule(lambda t, q, S, V, p: state_dependent_rate(t, q, V, p))


# ---------------------------------------------------------------------------
# Linear-quadratic benchmark: quadratic value-function ansatz with coefficient
# ODEs integrated backward from the horizon.


@dataclass(frozen=True)
class LQParams:
    sigma: float       # constant volatility (price units)
    gamma_perm: float  # permanent impact coefficient
    eta_temp: float    # quadratic temporary cost coefficient
    T: float
    Q0: float

    def __post_init__(self):
        if not (self.eta_temp > 0):
            raise ValueError("eta_temp must be > 0")
        if self.gamma_perm < 0 or self.sigma < 0:
            raise ValueError("gamma_perm and sigma must be >= 0")


@dataclass
class RiccatiSolution:
    """Coefficient paths of the quadratic ansatz and the feedback gains."""

    lq: LQParams
    t: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray

    def gains(self, t):
        a1 = np.interp(t, self.t, self.alpha1)
        a2 = np.interp(t, self.t, self.alpha2)
        return a1, a2


def _riccati_rhs(y, lq: LQParams):
    A, B, C, D = y
    g, e, s2 = lq.gamma_perm, lq.eta_temp, lq.sigma * lq.sigma
    m = 2.0 * A + g * B - g
    n = B + 2.0 * g * C
    dA = m * m / (4.0 * e)
    dB = m * n / (2.0 * e)
    dC = -s2 * C + n * n / (4.0 * e)
    dD = -s2 * C
    return np.array([dA, dB, dC, dD])


def lq_riccati_solve(lq: LQParams, grid_size: int = 10_000) -> RiccatiSolution:
    """Integrate the coefficient ODEs backward from t=T with fixed-step RK4.

    Terminal slice is (A, B, C, D)(T) = (0, -1, 0, 0). Raises BlowUp with the
    first failing time if any coefficient escapes past 1e12.
    """
    if grid_size < 100:
        raise ValueError("grid_size must be >= 100")
    G = int(grid_size)
    h = lq.T / G
    ys = np.empty((G + 1, 4))
    ys[G] = [0.0, -1.0, 0.0, 0.0]
    y = ys[G].copy()
    for i in range(G, 0, -1):
        # RK4 step of size -h (backward in time).
        k1 = _riccati_rhs(y, lq)
        k2 = _riccati_rhs(y - 0.5 * h * k1, lq)
        k3 = _riccati_rhs(y - 0.5 * h * k2, lq)
        k4 = _riccati_rhs(y - h * k3, lq)
        y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > RICCATI_CAP:
            finite = np.abs(y[np.isfinite(y)])
            raise BlowUp((i - 1) * h, float(finite.max()) if finite.size else math.inf)
        ys[i - 1] = y

    t = np.arange(G + 1) * h
    A, B, C, D = ys[:, 0], ys[:, 1], ys[:, 2], ys[:, 3]
    g, e = lq.gamma_perm, lq.eta_temp
    alpha1 = (2.0 * A + g * B - g) / (2.0 * e)
    alpha2 = (B + 2.0 * g * C) / (2.0 * e)
    return RiccatiSolution(lq=lq, t=t, A=A, B=B, C=C, D=D, alpha1=alpha1, alpha2=alpha2)


def riccati_residuals(sol: RiccatiSolution, n_points: int = 1000) -> np.ndarray:
    """Max absolute ODE residual per equation, sampled at interior grid points.

    Derivatives are estimated with 5-point central differences so the check is
    independent of the integrator.
    """
    G = len(sol.t) - 1
    h = sol.t[1] - sol.t[0]
    idx = np.unique(np.linspace(2, G - 2, n_points).astype(int))
    ys = np.stack([sol.A, sol.B, sol.C, sol.D], axis=1)
    # f'(x) ~ (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / (12h)
    deriv = (-ys[idx + 2] + 8.0 * ys[idx + 1] - 8.0 * ys[idx - 1] + ys[idx - 2]) / (12.0 * h)
    rhs = np.stack([_riccati_rhs(y, sol.lq) for y in ys[idx]])
    return np.max(np.abs(deriv - rhs), axis=0)


def lq_closed_form(lq: LQParams, t):
    """Hyperbolic-form coefficient expressions kept for reference only.

    These expressions are internally inconsistent with the terminal conditions
    (A diverges as t -> T), so the ODE integration above is authoritative.
    """
    g, e = lq.gamma_perm, lq.eta_temp
    delta = math.sqrt(g * g + 4.0 * e)
    tau = lq.T - np.asarray(t, dtype=float)
    A = (delta - g) / (4.0 * e) / np.tanh(delta / (2.0 * e) * tau) - g / 2.0
    den = delta * np.cosh(delta * tau) - g * np.sinh(delta * tau)
    B = -delta / den
    C = e * np.sinh(delta * tau) / (4.0 * den)
    return A, B, C


def lq_feedback_rate(sol: RiccatiSolution, t, q, S):
    """Feedback selling rate alpha1(t)*q + alpha2(t)*S, floored at zero."""
    a1, a2 = sol.gains(t)
    return np.maximum(a1 * np.asarray(q, dtype=float) + a2 * np.asarray(S, dtype=float), 0.0)


class LQRule:
    """Market rule wrapping a solved LQ feedback law."""

    def __init__(self, sol: RiccatiSolution):
        self.sol = sol

    def shares_for_step(self, k, t, S, V, q, p: MarketParams):
        nu = lq_feedback_rate(self.sol, t, q, S)
        return np.minimum(q, nu * p.dt)


def lq_params_from_market(p: MarketParams) -> LQParams:
    """Map scenario constants onto the arithmetic LQ benchmark's inputs.

    Volatility and permanent impact are converted to price units via S0; the
    quadratic temporary coefficient is the effective linear coefficient of the
    power-law impact at the uniform liquidation rate.
    """
    eps_eff = p.epsilon * (p.X0 / p.T) ** (p.beta - 1.0)
    return LQParams(
        sigma=math.sqrt(p.theta) * p.S0,
        gamma_perm=p.eta * p.S0,
        eta_temp=eps_eff,
        T=p.T,
        Q0=p.X0,
    )


def make_strategy(name: str, p: MarketParams, checkpoints: dict | None = None,
                  flow_steps: int = 4, riccati_grid: int = 10_000):
    """Build the trading rule for a strategy name.

    Learned strategies ('shortcut', 'ppo') need a checkpoint path in
    checkpoints; analytic strategies only need the scenario parameters.
    """
    checkpoints = checkpoints or {}
    if name == "twap":
        return twap_schedule(p).rule()
    if name == "vwap":
        return vwap_schedule(p).rule()
    if name == "ac_approx":
        return ac_approx_schedule(p).rule()
    if name == "heston_optimal":
        return heston_optimal_rule()
    if name == "state_dependent":
        return state_dependent_rule()
    if name == "lq_ac":
        return LQRule(lq_riccati_solve(lq_params_from_market(p), riccati_grid))
    if name == "shortcut":
        from .flow import load_policy, FlowRule
        from .errors import MissingCheckpoint

        path = checkpoints.get("shortcut")
        if path is None:
            raise MissingCheckpoint("strategy 'shortcut' needs a checkpoint path")
        return FlowRule(load_policy(path), M=flow_steps)
    if name == "ppo":
        from .ppo import load_ppo_policy, PPOMarketRule
        from .errors import MissingCheckpoint

        path = checkpoints.get("ppo")
        if path is None:
            raise MissingCheckpoint("strategy 'ppo' needs a checkpoint path")
        return PPOMarketRule(load_ppo_policy(path))
    raise ValueError(f"unknown strategy {name!r}; valid names: {', '.join(STRATEGY_NAMES)}")
