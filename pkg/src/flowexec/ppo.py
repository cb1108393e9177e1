"""Clipped-surrogate policy-gradient trainer for liquidation experts.

The actor emits the mean of a Gaussian over a pre-squash variable; a logistic
squash maps samples into the [0, 1] fraction the environment expects, with the
log-probability corrected for the change of variables. The critic is a scalar
value network. Everything trains with analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig, ExecutionEnv, normalize_obs
from .errors import Divergence
from .market import MarketParams
from .neural import Net, NetSpec, save_checkpoint, load_checkpoint
from .rng import path_rng, derive_seed, STREAM_TRAIN

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_EPISODE_TAG = 0xE9
_VALIDATION_TAG = 0x5A


@dataclass(frozen=True)
class PpoConfig:
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 10
    minibatch_size: int = 256
    rollout_steps: int = 2048
    entropy_coef: float = 1e-3
    value_coef: float = 0.5
    lr: float = 3e-4
    total_steps: int = 300_000
    target_kl: float = 0.02
    hidden: tuple = (64, 64)
    log_std_init: float = -1.0
    val_every: int = 5
    val_episodes: int = 16

    def __post_init__(self):
        if not (0 < self.clip_ratio < 1):
            raise ValueError("clip_ratio must be in (0, 1)")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")
        if not (0 <= self.gae_lambda <= 1):
            raise ValueError("gae_lambda must be in [0, 1]")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["hidden"] = list(self.hidden)
        return d


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=float)))


def squash_correction(u):
    """-log |da/du| for a = sigmoid(u); parameter-free, cancels in ratios."""
    u = np.asarray(u, dtype=float)
    return _softplus(u) + _softplus(-u)


class GaussianPolicy:
    """Actor (pre-squash mean), state-independent log-std, and a value critic."""

    def __init__(self, actor: Net, critic: Net, log_std: np.ndarray):
        self.actor = actor
        self.critic = critic
        self.log_std = np.asarray(log_std, dtype=float)
        self._m_ls = np.zeros_like(self.log_std)
        self._v_ls = np.zeros_like(self.log_std)
        self._ls_step = 0

    @classmethod
    def init(cls, obs_dim: int, action_dim: int, hidden, rng, log_std_init=-1.0,
             activation="tanh") -> "GaussianPolicy":
        actor = Net.init(NetSpec((obs_dim,) + tuple(hidden) + (action_dim,), activation), rng)
        critic = Net.init(NetSpec((obs_dim,) + tuple(hidden) + (1,), activation), rng)
        return cls(actor, critic, np.full(action_dim, float(log_std_init)))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def mean(self, obs):
        out, _ = self.actor.forward(obs)
        return out

    def value(self, obs):
        out, _ = self.critic.forward(obs)
        return np.asarray(out)[..., 0]

    def log_prob(self, obs_mean, u):
        """Squash-corrected log-density of the pre-squash sample u."""
        z = (np.asarray(u) - np.asarray(obs_mean)) / self.std
        logp_u = -0.5 * z * z - self.log_std - 0.5 * math.log(2.0 * math.pi)
        return logp_u.sum(axis=-1) - squash_correction(u).sum(axis=-1)

    def sample(self, obs, rng):
        m = self.mean(obs)
        u = m + self.std * rng.standard_normal(m.shape)
        return u, self.log_prob(m, u)

    def deterministic_action(self, obs):
        return _sigmoid(self.mean(obs))

    def update_log_std(self, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self._ls_step += 1
        self._m_ls = beta1 * self._m_ls + (1 - beta1) * grad
        self._v_ls = beta2 * self._v_ls + (1 - beta2) * grad * grad
        m_hat = self._m_ls / (1 - beta1 ** self._ls_step)
        v_hat = self._v_ls / (1 - beta2 ** self._ls_step)
        self.log_std = np.clip(self.log_std - lr * m_hat / (np.sqrt(v_hat) + eps),
                               LOG_STD_MIN, LOG_STD_MAX)


def collect_rollout(policy: GaussianPolicy, env: ExecutionEnv, steps: int,
                    rng: np.random.Generator, episode_seeds) -> dict:
    """Run the env for a fixed number of steps, chaining episodes as needed.

    Actions are stored pre-squash together with their log-probabilities;
    episode_seeds is an iterator of reseeds for each new episode.
    """
    obs_buf = np.empty((steps, 4))
    u_buf = np.empty((steps, policy.log_std.size))
    logp_buf = np.empty(steps)
    rew_buf = np.empty(steps)
    val_buf = np.empty(steps)
    done_buf = np.zeros(steps)
    episode_rewards = []

    if env.done:
        obs = env.reset(next(episode_seeds)).as_array()
    else:
        obs = env._observation().as_array()
    ep_total = 0.0
    for i in range(steps):
        u, logp = policy.sample(obs, rng)
        a = float(_sigmoid(u)[0])
        res = env.step(a)
        obs_buf[i] = obs
        u_buf[i] = u
        logp_buf[i] = logp
        rew_buf[i] = res.reward
        val_buf[i] = policy.value(obs)
        done_buf[i] = 1.0 if res.done else 0.0
        ep_total += res.reward
        if res.done:
            episode_rewards.append(ep_total)
            ep_total = 0.0
            obs = env.reset(next(episode_seeds)).as_array()
        else:
            obs = res.obs.as_array()
    last_val = 0.0 if done_buf[-1] else float(policy.value(obs))
    return {"obs": obs_buf, "u": u_buf, "logp": logp_buf, "rewards": rew_buf,
            "values": val_buf, "dones": done_buf, "last_value": last_val,
            "episode_rewards": episode_rewards}


def gae_raw(rewards, values, dones, last_value, gamma, lam):
    """Backward generalized-advantage recursion; episode boundaries cut the tail."""
    T = len(rewards)
    adv = np.zeros(T)
    next_adv = 0.0
    next_val = last_value
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_val * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_val = values[t]
    return adv


def gae_advantages(batch: dict, gamma: float, lam: float):
    """Normalized advantages and value targets for one rollout batch."""
    raw = gae_raw(batch["rewards"], batch["values"], batch["dones"],
                  batch["last_value"], gamma, lam)
    returns = raw + batch["values"]
    adv = (raw - raw.mean()) / (raw.std() + 1e-8)
    return adv, returns


def ppo_update(policy: GaussianPolicy, batch: dict, cfg: PpoConfig,
               rng: np.random.Generator):
    """Clipped-surrogate update with KL early stop; returns loss/KL stats."""
    obs, u = batch["obs"], batch["u"]
    logp_old = batch["logp"]
    adv, returns = gae_advantages(batch, cfg.gamma, cfg.gae_lambda)
    n = len(obs)
    corr = squash_correction(u).sum(axis=-1)

    policy_losses, value_losses, kl = [], [], 0.0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = order[start:start + cfg.minibatch_size]
            B = len(mb)
            mean, cache_a = policy.actor.forward(obs[mb])
            std = policy.std
            z = (u[mb] - mean) / std
            logp_u = (-0.5 * z * z - policy.log_std - 0.5 * math.log(2 * math.pi)).sum(axis=-1)
            logp_new = logp_u - corr[mb]
            ratio = np.exp(logp_new - logp_old[mb])
            unclipped = ratio * adv[mb]
            clipped = np.clip(ratio, 1 - cfg.clip_ratio, 1 + cfg.clip_ratio) * adv[mb]
            surrogate = np.minimum(unclipped, clipped)
            policy_losses.append(-float(surrogate.mean()))

            # Gradient flows only where the unclipped branch is active.
            active = (unclipped <= clipped).astype(float)
            g_logp = -(adv[mb] * ratio * active) / B
            g_mean = (g_logp[:, None] * (u[mb] - mean) / (std * std))
            policy.actor.adam_update(policy.actor.backward(cache_a, g_mean), cfg.lr)
            g_ls = (g_logp[:, None] * (z * z - 1.0)).sum(axis=0) - cfg.entropy_coef
            policy.update_log_std(g_ls, cfg.lr)

            v, cache_c = policy.critic.forward(obs[mb])
            verr = v[:, 0] - returns[mb]
            value_losses.append(float((verr * verr).mean()))
            g_v = (cfg.value_coef * 2.0 * verr / B)[:, None]
            policy.critic.adam_update(policy.critic.backward(cache_c, g_v), cfg.lr)

        mean_all = policy.mean(obs)
        z_all = (u - mean_all) / policy.std
        logp_all = (-0.5 * z_all * z_all - policy.log_std
                    - 0.5 * math.log(2 * math.pi)).sum(axis=-1) - corr
        kl = float(np.mean(logp_old - logp_all))
        if kl > cfg.target_kl:
            break
    return float(np.mean(policy_losses)), float(np.mean(value_losses)), kl


def eval_env_episodes(action_fn, env_cfg: EnvConfig, seeds):
    """Roll deterministic episodes; returns (total rewards, shortfalls) per seed.

    action_fn(k, obs_array) -> fraction in [0, 1].
    """
    env = ExecutionEnv(env_cfg)
    totals, shortfalls = [], []
    for s in seeds:
        obs = env.reset(int(s)).as_array()
        total, k = 0.0, 0
        while True:
            res = env.step(float(action_fn(k, obs)))
            total += res.reward
            k += 1
            if res.done:
                break
            obs = res.obs.as_array()
        totals.append(total)
        shortfalls.append(env.implementation_shortfall())
    return np.asarray(totals), np.asarray(shortfalls)


def policy_action_fn(policy: GaussianPolicy):
    return lambda k, obs: float(policy.deterministic_action(obs)[0])


def twap_action_fn(n_steps: int):
    """Uniform-schedule fractions of remaining inventory: 1/(N-k)."""
    return lambda k, obs: 1.0 / (n_steps - k)


def train_ppo(cfg: PpoConfig, env_cfg: EnvConfig, seed: int):
    """Train to a fixed step budget, keeping the best validation snapshot.

    Returns (policy, history) where history carries per-iteration mean episode
    reward and the validation curve.
    """
    rng = path_rng(seed, STREAM_TRAIN)
    policy = GaussianPolicy.init(4, 1, cfg.hidden, rng, cfg.log_std_init)
    env = ExecutionEnv(env_cfg)

    def episode_seed_iter():
        i = 0
        while True:
            yield derive_seed(seed, _EPISODE_TAG, i)
            i += 1

    seeds_iter = episode_seed_iter()
    val_seeds = [derive_seed(seed, _VALIDATION_TAG, i) for i in range(cfg.val_episodes)]

    iterations = max(1, cfg.total_steps // cfg.rollout_steps)
    history = {"mean_episode_reward": [], "validation": [], "policy_loss": [],
               "value_loss": [], "kl": []}
    best = (-math.inf, None)
    for it in range(iterations):
        batch = collect_rollout(policy, env, cfg.rollout_steps, rng, seeds_iter)
        if batch["episode_rewards"]:
            mean_ep = float(np.mean(batch["episode_rewards"]))
            if not math.isfinite(mean_ep):
                raise Divergence(f"mean episode reward is not finite at iteration {it}")
            history["mean_episode_reward"].append(mean_ep)
        pl, vl, kl = ppo_update(policy, batch, cfg, rng)
        history["policy_loss"].append(pl)
        history["value_loss"].append(vl)
        history["kl"].append(kl)
        if it % cfg.val_every == 0 or it == iterations - 1:
            val_rewards, _ = eval_env_episodes(policy_action_fn(policy), env_cfg, val_seeds)
            score = float(val_rewards.mean())
            history["validation"].append((it, score))
            if score > best[0]:
                best = (score, _snapshot(policy))
    if best[1] is not None:
        _restore(policy, best[1])
    return policy, history


def _snapshot(policy: GaussianPolicy):
    return ([w.copy() for w in policy.actor.W], [b.copy() for b in policy.actor.b],
            [w.copy() for w in policy.critic.W], [b.copy() for b in policy.critic.b],
            policy.log_std.copy())


def _restore(policy: GaussianPolicy, snap):
    aW, ab, cW, cb, ls = snap
    policy.actor.W = [w.copy() for w in aW]
    policy.actor.b = [b.copy() for b in ab]
    policy.critic.W = [w.copy() for w in cW]
    policy.critic.b = [b.copy() for b in cb]
    policy.log_std = ls.copy()


class PPOMarketRule:
    """Deterministic policy as a market trading rule (fraction of remaining)."""

    def __init__(self, policy: GaussianPolicy):
        self.policy = policy

    def shares_for_step(self, k, t, S, V, q, p: MarketParams):
        obs = normalize_obs(np.full_like(q, t), q, S, V, p)
        a = self.policy.deterministic_action(np.atleast_2d(obs))[:, 0]
        return a * q


def save_ppo_policy(path, policy: GaussianPolicy, extra_meta: dict | None = None) -> None:
    arrays = policy.actor.to_arrays("actor")
    arrays.update(policy.critic.to_arrays("critic"))
    arrays["log_std"] = policy.log_std
    meta = {"kind": "ppo_policy", "actor": policy.actor.spec_meta(),
            "critic": policy.critic.spec_meta(), "extra": extra_meta or {}}
    save_checkpoint(path, arrays, meta)


def load_ppo_policy(path) -> GaussianPolicy:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "ppo_policy":
        raise ValueError(f"{path} is not a ppo policy checkpoint")
    actor = Net.from_arrays(meta["actor"], arrays, "actor")
    critic = Net.from_arrays(meta["critic"], arrays, "critic")
    return GaussianPolicy(actor, critic, np.asarray(arrays["log_std"], dtype=float))
