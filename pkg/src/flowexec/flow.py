"""Shortcut flow-matching policy: self-consistency training and few-step inference.

The velocity network is conditioned on the integration step size so that a
handful of large ODE steps reproduce what many small ones would do. Rows with
step size zero are supervised directly on the noise-to-action displacement;
the remaining rows bootstrap a two-half-steps target with gradients blocked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import normalize_obs
from .market import MarketParams, simulate_paths, Trajectory
from .neural import Net, NetSpec, save_checkpoint, load_checkpoint
from .rng import path_rng, STREAM_POLICY_NOISE, STREAM_TRAIN

# Step-size levels 1/128 .. 1/2, sampled uniformly over levels.
D_LEVELS = tuple(2.0 ** -m for m in range(7, 0, -1))

OBS_DIM = 4
STEP_CHANNELS = 3  # raw d, log2(1/d) for d>0, flag for d == 0


def sample_dt_pairs(rng: np.random.Generator, n: int):
    """Draw (d, t) with d log-uniform over the levels and t on the d-grid."""
    d = np.asarray(D_LEVELS)[rng.integers(0, len(D_LEVELS), size=n)]
    slots = np.round(1.0 / d)
    t = d * np.floor(rng.random(n) * slots)
    return d, t


def sample_dt_pair(rng: np.random.Generator):
    d, t = sample_dt_pairs(rng, 1)
    return float(d[0]), float(t[0])


def encode_step_size(d):
    """Three conditioning channels so the zero-step branch stays distinguishable."""
    d = np.asarray(d, dtype=float)
    pos = d > 0
    with np.errstate(divide="ignore"):
        log2_inv = np.where(pos, -np.log2(np.where(pos, d, 1.0)), 0.0)
    zero_flag = np.where(pos, 0.0, 1.0)
    return np.stack([d, log2_inv, zero_flag], axis=-1)


@dataclass
class AffineCodec:
    """Invertible per-channel affine normalization."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if np.any(self.scale <= 0):
            raise ValueError("codec scale must be positive")

    @classmethod
    def from_data(cls, X, min_scale: float = 1e-8) -> "AffineCodec":
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), min_scale))

    def encode(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def decode(self, y):
        return np.asarray(y, dtype=float) * self.scale + self.mean


class FlowPolicy:
    """Velocity network plus the observation/action normalizations."""

    def __init__(self, net: Net, action_codec: AffineCodec, obs_codec: AffineCodec,
                 action_dim: int = 1):
        self.net = net
        self.action_codec = action_codec
        self.obs_codec = obs_codec
        self.action_dim = action_dim

    @staticmethod
    def input_dim(action_dim: int = 1) -> int:
        return OBS_DIM + action_dim + 1 + STEP_CHANNELS

    def features(self, x, t, d, obs_n):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        obs_n = np.atleast_2d(np.asarray(obs_n, dtype=float))
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        d = np.broadcast_to(np.asarray(d, dtype=float), (B,))
        return np.concatenate([obs_n, x, t[:, None], encode_step_size(d)], axis=1)

    def velocity(self, x, t, d, obs_n, with_cache: bool = False):
        out, cache = self.net.forward(self.features(x, t, d, obs_n))
        return (out, cache) if with_cache else out


def shortcut_loss_and_grads(policy: FlowPolicy, x0, x1, obs_n, t, d):
    """Loss and parameter gradients for one batch with explicit (x0, t, d).

    Rows with d == 0 take the displacement target x1 - x0; rows with d > 0
    take the averaged two-half-steps target, computed without gradient flow.
    The trained query always uses step size min(2d, 1).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    obs_n = np.atleast_2d(np.asarray(obs_n, dtype=float))
    t = np.asarray(t, dtype=float)
    d = np.asarray(d, dtype=float)

    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    target = x1 - x0
    b = d > 0
    if b.any():
        s_t = policy.velocity(xt[b], t[b], d[b], obs_n[b])
        x_td = xt[b] + d[b][:, None] * s_t
        s_td = policy.velocity(x_td, t[b] + d[b], d[b], obs_n[b])
        target[b] = 0.5 * (s_t + s_td)

    query_d = np.minimum(2.0 * d, 1.0)
    pred, cache = policy.velocity(xt, t, query_d, obs_n, with_cache=True)
    diff = pred - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads = policy.net.backward(cache, 2.0 * diff / len(x0))
    return loss, grads


def shortcut_train_step(policy: FlowPolicy, x1, obs_n, rng: np.random.Generator,
                        p_frac: float, lr: float) -> float:
    """Sample the latent batch, apply one optimizer step, return the pre-step loss."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    B = x1.shape[0]
    x0 = rng.standard_normal(x1.shape)
    d, t = sample_dt_pairs(rng, B)
    n_a = int(math.floor(p_frac * B))
    if n_a > 0:
        d[:n_a] = 0.0
        t[:n_a] = rng.random(n_a)
    loss, grads = shortcut_loss_and_grads(policy, x0, x1, obs_n, t, d)
    policy.net.adam_update(grads, lr)
    return loss


def shortcut_infer_batch(policy: FlowPolicy, obs_features, a0, M: int):
    """Integrate the velocity field in M equal steps from noise a0; returns actions in [0, 1]."""
    if M < 1:
        raise ValueError("M must be >= 1")
    obs_n = policy.obs_codec.encode(np.atleast_2d(np.asarray(obs_features, dtype=float)))
    a = np.atleast_2d(np.asarray(a0, dtype=float)).copy()
    d = 1.0 / M
    for k in range(M):
        a = a + d * policy.velocity(a, k * d, d, obs_n)
    action = policy.action_codec.decode(a)
    return np.clip(action, 0.0, 1.0)


def shortcut_infer(policy: FlowPolicy, obs_features, M: int,
                   rng: np.random.Generator | None = None, a0=None) -> np.ndarray:
    """Single-observation inference; a0 defaults to one standard-normal draw."""
    if a0 is None:
        if rng is None:
            raise ValueError("need rng or a0")
        a0 = rng.standard_normal(policy.action_dim)
    return shortcut_infer_batch(policy, obs_features, np.atleast_2d(a0), M)[0]


@dataclass
class FlowTrainConfig:
    steps: int = 12_000
    batch_size: int = 256
    lr: float = 1e-3
    p_frac: float = 0.75
    hidden: tuple = (128, 128)
    activation: str = "tanh"
    log_every: int = 1000

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch_size": self.batch_size, "lr": self.lr,
                "p_frac": self.p_frac, "hidden": list(self.hidden),
                "activation": self.activation, "log_every": self.log_every}


def train_flow(obs_features, actions, cfg: FlowTrainConfig, seed: int):
    """Fit a shortcut policy on (observation features, action) pairs.

    obs_features is (M, 4) in the environment's normalized-state convention;
    actions is (M, action_dim) raw liquidation fractions. Returns the policy
    and the per-log-interval loss history.
    """
    obs_features = np.asarray(obs_features, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1:
        actions = actions[:, None]
    action_dim = actions.shape[1]

    obs_codec = AffineCodec.from_data(obs_features)
    action_codec = AffineCodec.from_data(actions)
    obs_n_all = obs_codec.encode(obs_features)
    x1_all = action_codec.encode(actions)

    rng = path_rng(seed, STREAM_TRAIN)
    sizes = (FlowPolicy.input_dim(action_dim),) + tuple(cfg.hidden) + (action_dim,)
    net = Net.init(NetSpec(sizes, cfg.activation), rng)
    policy = FlowPolicy(net, action_codec, obs_codec, action_dim)

    losses = []
    n_rows = len(x1_all)
    for step in range(cfg.steps):
        idx = rng.integers(0, n_rows, size=cfg.batch_size)
        loss = shortcut_train_step(policy, x1_all[idx], obs_n_all[idx], rng,
                                   cfg.p_frac, cfg.lr)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            losses.append((step, loss))
    return policy, losses


class FlowRule:
    """Market trading rule: one inferred liquidation fraction per step.

    Per-path inference noise comes from a dedicated stream of each path's
    seed, so rollouts are reproducible and CRN-compatible with other rules.
    """

    def __init__(self, policy: FlowPolicy, M: int = 4):
        self.policy = policy
        self.M = int(M)
        self._noise = None

    def begin(self, seeds, p: MarketParams):
        n = len(seeds)
        self._noise = np.empty((n, p.N, self.policy.action_dim))
        for i in range(n):
            self._noise[i] = path_rng(int(seeds[i]), STREAM_POLICY_NOISE).standard_normal(
                (p.N, self.policy.action_dim))

    def shares_for_step(self, k, t, S, V, q, p: MarketParams):
        obs = normalize_obs(np.full_like(q, t), q, S, V, p)
        a = shortcut_infer_batch(self.policy, obs, self._noise[:, k, :], self.M)
        return a[:, 0] * q


def rollout_policy(policy: FlowPolicy, p: MarketParams, M: int, seed: int) -> Trajectory:
    """Simulate one complete-liquidation path driven by the policy."""
    return simulate_paths(p, FlowRule(policy, M), [seed], record=True).trajectory(0)


def save_policy(path, policy: FlowPolicy, extra_meta: dict | None = None) -> None:
    arrays = policy.net.to_arrays("net")
    arrays["action_codec.mean"] = policy.action_codec.mean
    arrays["action_codec.scale"] = policy.action_codec.scale
    arrays["obs_codec.mean"] = policy.obs_codec.mean
    arrays["obs_codec.scale"] = policy.obs_codec.scale
    meta = {"kind": "shortcut_policy", "net": policy.net.spec_meta(),
            "action_dim": policy.action_dim, "extra": extra_meta or {}}
    save_checkpoint(path, arrays, meta)


def load_policy(path) -> FlowPolicy:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "shortcut_policy":
        raise ValueError(f"{path} is not a shortcut policy checkpoint")
    net = Net.from_arrays(meta["net"], arrays, "net")
    action_codec = AffineCodec(arrays["action_codec.mean"], arrays["action_codec.scale"])
    obs_codec = AffineCodec(arrays["obs_codec.mean"], arrays["obs_codec.scale"])
    return FlowPolicy(net, action_codec, obs_codec, int(meta["action_dim"]))
