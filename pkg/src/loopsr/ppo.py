"""Asymmetric actor-critic PPO under domain randomization.

The actor sees the 4-float observation, the critic the 15-float privileged
state.  During pretraining, labeled trajectories are collected from periodic
policy snapshots so the encoder dataset spans several checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from loopsr.errors import ConfigError
from loopsr.numgrad import MLP, Adam, NumericalError, ParamSet, Tensor, backward, minimum
from loopsr.numgrad.checkpoint import load_weights, save_weights
from loopsr.terrasim import OBS_DIM, PRIV_DIM, EnvParams, VecEnv, rollout_batch

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class PPOConfig:
    envs: int = 64
    steps: int = 24
    iterations: int = 1000
    n_start: int = 100
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    minibatches: int = 4
    ent_coef: float = 0.005
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: tuple = (64, 64)
    init_log_std: float = -0.5
    snapshots: int = 10
    rollouts_per_snapshot: int = 4
    seed: int = 0

    def validate(self) -> None:
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigError("gamma and lam must lie in [0, 1]")
        if self.envs < 1 or self.steps < 1 or self.iterations < 0 or self.epochs < 1 or self.minibatches < 1:
            raise ConfigError("envs, steps, epochs and minibatches must be positive")
        if (self.envs * self.steps) % self.minibatches:
            raise ConfigError("envs * steps must be divisible by minibatches")

    def digest(self) -> int:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:6], "little")


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, last_good: "ActorCritic | None" = None):
        super().__init__(msg)
        self.last_good = last_good


class PolicyNet:
    """Gaussian policy on the observation; mean from an MLP, state-independent log-std."""

    def __init__(self, params: ParamSet, hidden, rng, init_log_std: float):
        self.params = params
        self.mlp = MLP(params, "actor", [OBS_DIM, *hidden, 1], rng, out_gain=0.01)
        params["actor.log_std"] = np.array([init_log_std])

    def __call__(self, obs) -> tuple[Tensor, Tensor]:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != OBS_DIM:
            raise ConfigError(f"actor expects {OBS_DIM}-float observations, got {obs.shape[-1]}")
        mean = self.mlp(obs)
        return mean, self.params["actor.log_std"].clip(LOG_STD_MIN, LOG_STD_MAX)


class CriticNet:
    def __init__(self, params: ParamSet, hidden, rng):
        self.mlp = MLP(params, "critic", [PRIV_DIM, *hidden, 1], rng)

    def __call__(self, priv) -> Tensor:
        priv = np.asarray(priv, dtype=np.float64)
        if priv.shape[-1] != PRIV_DIM:
            raise ConfigError(f"critic expects {PRIV_DIM}-float privileged states, got {priv.shape[-1]}")
        return self.mlp(priv)


class ActorCritic:
    def __init__(self, cfg: PPOConfig | None = None, seed: int | None = None):
        self.cfg = cfg or PPOConfig()
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        self.actor_params, self.critic_params = ParamSet(), ParamSet()
        self.actor = PolicyNet(self.actor_params, self.cfg.hidden, rng, self.cfg.init_log_std)
        self.critic = CriticNet(self.critic_params, self.cfg.hidden, rng)
        self.iteration = 0

    def act_mean(self, obs) -> np.ndarray:
        mean, _ = self.actor(np.atleast_2d(obs))
        return mean.data[:, 0]

    def value(self, priv) -> np.ndarray:
        return self.critic(np.atleast_2d(priv)).data[:, 0]

    def sample(self, obs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Sampled raw actions (before clamping) and their log-probabilities."""
        mean, log_std = self.actor(np.atleast_2d(obs))
        mu, ls = mean.data[:, 0], float(log_std.data[0])
        a = mu + math.exp(ls) * rng.standard_normal(mu.shape)
        logp = -0.5 * ((a - mu) / math.exp(ls)) ** 2 - ls - _HALF_LOG_2PI
        return a, logp

    def stochastic_policy(self, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
        return lambda obs: self.sample(obs, rng)[0]

    def deterministic_policy(self) -> Callable[[np.ndarray], np.ndarray]:
        return self.act_mean

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(self.actor_params.arrays())
        out.update(self.critic_params.arrays())
        out["meta.iteration"] = np.array([float(self.iteration)])
        out["meta.config_hash"] = np.array([float(self.cfg.digest())])
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        arrays = dict(arrays)
        self.iteration = int(arrays.pop("meta.iteration")[0])
        arrays.pop("meta.config_hash", None)
        self.actor_params.load_arrays({k: v for k, v in arrays.items() if k.startswith("actor.")})
        self.critic_params.load_arrays({k: v for k, v in arrays.items() if k.startswith("critic.")})

    def save(self, path) -> None:
        save_weights(self.state_arrays(), path)

    @classmethod
    def load(cls, path, cfg: PPOConfig | None = None) -> "ActorCritic":
        ac = cls(cfg)
        ac.load_arrays(load_weights(path))
        return ac

    def clone(self) -> "ActorCritic":
        ac = ActorCritic(self.cfg)
        ac.load_arrays({k: v.copy() for k, v in self.state_arrays().items()})
        return ac


# -- advantage estimation -----------------------------------------------------


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimates and returns (advantages not normalized).

    ``values`` has one more row than ``rewards``: the bootstrap value of the
    state after the last step.  ``dones[t]`` cuts the recursion after step t.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise ConfigError("gamma and lam must lie in [0, 1]")
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape != rewards.shape or values.shape[1:] != rewards.shape[1:]:
        raise ConfigError(f"misaligned arrays: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values[:-1]


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-12)


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    privileged: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray  # (T + 1, n)
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def finish(self, gamma: float, lam: float) -> None:
        adv, ret = compute_gae(self.rewards, self.values, self.dones, gamma, lam)
        if not np.all(np.isfinite(adv)):
            raise NumericalError("compute_gae")
        self.advantages, self.returns = adv, ret


def _gaussian_logp(actions: np.ndarray, mean: Tensor, log_std: Tensor) -> Tensor:
    z = (Tensor(actions) - mean) / log_std.exp()
    return z.square() * (-0.5) - log_std - _HALF_LOG_2PI


def ppo_loss(ac: ActorCritic, obs, priv, actions, old_logp, adv, returns, cfg: PPOConfig):
    """Clipped surrogate + value + entropy loss for one minibatch.

    Returns ``(loss, stats)`` where ``loss`` is a scalar :class:`Tensor`.
    """
    mean, log_std = ac.actor(obs)
    logp = _gaussian_logp(actions[:, None], mean, log_std)[:, 0]
    ratio = (logp - Tensor(old_logp)).exp()
    surr1 = ratio * adv
    surr2 = ratio.clip(1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    pg_loss = -minimum(surr1, surr2).mean()
    v = ac.critic(priv)[:, 0]
    v_loss = (v - Tensor(returns)).square().mean()
    entropy = log_std.sum() + (0.5 + _HALF_LOG_2PI)
    loss = pg_loss + v_loss * cfg.vf_coef - entropy * cfg.ent_coef
    clip_frac = float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip))
    return loss, {"pg_loss": pg_loss.item(), "v_loss": v_loss.item(), "entropy": entropy.item(), "clip_frac": clip_frac}


class PPOTrainer:
    """Owns the optimizers and the persistent vectorized environment."""

    def __init__(self, ac: ActorCritic, env_params: EnvParams | Callable[[], EnvParams], cfg: PPOConfig | None = None,
                 seed=0):
        self.ac = ac
        self.cfg = cfg or ac.cfg
        self.cfg.validate()
        self.opt_actor = Adam(ac.actor_params, lr=self.cfg.lr)
        self.opt_critic = Adam(ac.critic_params, lr=self.cfg.lr)
        self.seed = [int(v) for v in np.atleast_1d(seed)]
        self.rng = np.random.default_rng([*self.seed, 1])
        self.episode = 0
        self.set_env_params(env_params)
        self._reset()

    def set_env_params(self, env_params: EnvParams) -> None:
        """New parameters take effect at the next episode boundary."""
        env_params.validate()
        self.env_params = env_params

    def _reset(self) -> None:
        self.env = VecEnv(self.env_params, self.cfg.envs)
        seeds = [[*self.seed, 2, self.episode, i] for i in range(self.cfg.envs)]
        self.episode += 1
        self.obs = self.env.reset(seeds)
        self.priv = self.env.privileged(self.obs)

    def collect(self) -> RolloutBuffer:
        cfg, n, T = self.cfg, self.cfg.envs, self.cfg.steps
        obs = np.empty((T, n, OBS_DIM))
        priv = np.empty((T, n, PRIV_DIM))
        acts, logps, rews, vals, dones = (np.empty((T, n)) for _ in range(5))
        for t in range(T):
            obs[t], priv[t] = self.obs, self.priv
            a, lp = self.ac.sample(self.obs, self.rng)
            acts[t], logps[t] = a, lp
            vals[t] = self.ac.value(self.priv)
            o2, r, d, p2 = self.env.step(a)
            if d[0]:
                # time-limit truncation: bootstrap from the final state
                r = r + cfg.gamma * self.ac.value(p2)
                self._reset()
            else:
                self.obs, self.priv = o2, p2
            rews[t], dones[t] = r, d
        last = self.ac.value(self.priv)
        return RolloutBuffer(obs, priv, acts, logps, rews, np.concatenate([vals, last[None]]), dones)

    def update(self, buf: RolloutBuffer) -> dict:
        return ppo_update(buf, self.ac, self.cfg, self.opt_actor, self.opt_critic, self.rng)

    def iterate(self) -> dict:
        buf = self.collect()
        stats = self.update(buf)
        stats["mean_reward"] = float(buf.rewards.mean())
        self.ac.iteration += 1
        stats["iteration"] = self.ac.iteration
        return stats


def ppo_update(buf: RolloutBuffer, ac: ActorCritic, cfg: PPOConfig, opt_actor: Adam, opt_critic: Adam,
               rng: np.random.Generator) -> dict:
    if buf.advantages is None:
        buf.finish(cfg.gamma, cfg.lam)
    N = buf.rewards.size
    obs = buf.obs.reshape(N, OBS_DIM)
    priv = buf.privileged.reshape(N, PRIV_DIM)
    acts, old_logp = buf.actions.reshape(N), buf.logp.reshape(N)
    adv = normalize_advantages(buf.advantages.reshape(N))
    ret = buf.returns.reshape(N)
    mb = N // cfg.minibatches
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        for k in range(cfg.minibatches):
            idx = perm[k * mb:(k + 1) * mb]
            ac.actor_params.zero_grad()
            ac.critic_params.zero_grad()
            loss, stats = ppo_loss(ac, obs[idx], priv[idx], acts[idx], old_logp[idx], adv[idx], ret[idx], cfg)
            if not math.isfinite(loss.item()):
                raise NumericalError("ppo_loss")
            backward(loss)
            opt_actor.step(max_grad_norm=cfg.max_grad_norm)
            opt_critic.step(max_grad_norm=cfg.max_grad_norm)
            stats["loss"] = loss.item()
            for key, val in stats.items():
                totals[key] = totals.get(key, 0.0) + val
            count += 1
    return {k: v / count for k, v in totals.items()}


# -- pretraining ----------------------------------------------------------------


@dataclass
class PretrainResult:
    policy: ActorCritic
    dataset: list
    metrics: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)


def snapshot_iterations(n: int, count: int) -> list[int]:
    """Iterations (1-based) at which dataset snapshots are taken: every ``n / count``."""
    if n <= 0:
        return []
    return sorted({max(1, round(n * (k + 1) / count)) for k in range(count)})


def collect_labeled(ac: ActorCritic, env_params: EnvParams, n_envs: int, rounds: int, seed, checkpoint_id: int,
                    deterministic: bool = False) -> list:
    records = []
    for r in range(rounds):
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 3, checkpoint_id, r])
        policy = ac.deterministic_policy() if deterministic else ac.stochastic_policy(rng)
        seeds = [[*np.atleast_1d(seed).tolist(), 4, checkpoint_id, r, i] for i in range(n_envs)]
        records += rollout_batch(env_params, policy, seeds, checkpoint_id=checkpoint_id).records
    return records


def pretrain(cfg: PPOConfig, env_params: EnvParams | None = None, on_iteration: Callable | None = None,
             metrics_sink: Callable[[dict], None] | None = None) -> PretrainResult:
    """PPO under domain randomization while accumulating a labeled trajectory dataset.

    ``on_iteration(i, dataset)`` runs after each PPO update (the encoder is
    co-trained through it for ``i > n_start``).
    """
    cfg.validate()
    env_params = env_params or EnvParams.pretraining()
    ac = ActorCritic(cfg)
    trainer = PPOTrainer(ac, env_params, cfg, seed=cfg.seed)
    dataset: list = []
    result = PretrainResult(ac, dataset)
    snaps = snapshot_iterations(cfg.iterations, cfg.snapshots)
    last_good = ac.clone()
    for i in range(1, cfg.iterations + 1):
        try:
            stats = trainer.iterate()
        except NumericalError as exc:
            raise DivergenceError(f"training diverged at iteration {i}: {exc}", last_good) from exc
        if not math.isfinite(stats["mean_reward"]):
            raise DivergenceError(f"mean reward is not finite at iteration {i}", last_good)
        result.metrics.append(stats)
        if metrics_sink is not None:
            metrics_sink(stats)
        if i in snaps:
            ck = snaps.index(i) + 1
            dataset += collect_labeled(ac, env_params, cfg.envs, cfg.rollouts_per_snapshot, cfg.seed, ck)
            result.snapshots[ck] = ac.clone()
            last_good = result.snapshots[ck]
        if on_iteration is not None and i > cfg.n_start:
            on_iteration(i, dataset)
    return result


def train_policy(ac: ActorCritic, env_params: EnvParams, iterations: int, seed: int,
                 metrics_sink: Callable[[dict], None] | None = None) -> list:
    """Continue PPO on ``env_params`` for ``iterations`` updates (fresh optimizer state)."""
    trainer = PPOTrainer(ac, env_params, seed=seed)
    out = []
    for _ in range(iterations):
        stats = trainer.iterate()
        out.append(stats)
        if metrics_sink is not None:
            metrics_sink(stats)
    return out


def evaluate(ac: ActorCritic, env_params: EnvParams, episodes: int, seed: int = 0) -> dict:
    """Deterministic (mean-action) evaluation; rewards averaged per step."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    seeds = [[seed, 5, e] for e in range(episodes)]
    env = VecEnv(env_params, episodes)
    obs = env.reset(seeds)
    total_r = np.zeros(episodes)
    total_v = np.zeros(episodes)
    steps = 0
    done = np.zeros(episodes, dtype=bool)
    while not done[0]:
        obs, r, done, _ = env.step(ac.act_mean(obs))
        total_r += r
        total_v += env.v
        steps += 1
    return {
        "mean_reward": float(total_r.mean() / steps),
        "mean_velocity": float(total_v.mean() / steps),
        "distance": float(env.x.mean()),
        "episodes": episodes,
    }
