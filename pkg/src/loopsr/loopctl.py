"""Lifelong sim-to-real adaptation loop.

Each loop collects a small batch of reward-free trajectories from the test
environment with the deployed policy, identifies the environment through the
codec and the reference store, moves the simulation configuration towards the
estimate and continues PPO training there.  The deployed policy is refreshed
every ``episodes_per_redeploy`` loops.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from loopsr.errors import ConfigError
from loopsr.latentstore import DEFAULT_NEIGHBORS, FusedParams, ReferenceStore, fuse, knn_retrieve
from loopsr.ppo import ActorCritic, PPOConfig, PPOTrainer, evaluate, train_policy
from loopsr.terrasim import (
    FULL_RANGE,
    N_TERRAINS,
    PARAM_HI,
    PARAM_LO,
    PARAM_MID,
    EnvParams,
    RobotParams,
    Trajectory,
    check_simplex,
    rollout_batch,
    sampling_interval,
)

log = logging.getLogger(__name__)


@dataclass
class LoopConfig:
    alpha: float = 0.8
    tau: float = 0.7
    neighbors: int = DEFAULT_NEIGHBORS
    trajectories_per_batch: int = 5
    iterations_per_episode: int = 200
    episodes_per_redeploy: int = 10
    loops: int = 10
    eval_episodes: int = 32
    stochastic_deployment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.tau <= 1.0):
            raise ConfigError("alpha and tau must lie in [0, 1]")
        if self.neighbors < 1 or self.trajectories_per_batch < 1 or self.eval_episodes < 1:
            raise ConfigError("neighbors, trajectories_per_batch and eval_episodes must be positive")
        if self.iterations_per_episode < 0 or self.loops < 0 or self.episodes_per_redeploy < 1:
            raise ConfigError("loop schedule values must be non-negative (redeploy period positive)")

    @staticmethod
    def continual_range(R=FULL_RANGE) -> np.ndarray:
        """Randomization half-widths used during continual training: half of ``R``."""
        return np.asarray(R, dtype=np.float64) / 2.0


@dataclass
class CurrentParams:
    c_e: np.ndarray
    c_r: np.ndarray

    @classmethod
    def initial(cls) -> "CurrentParams":
        """Uniform terrain distribution and mid-range robot parameters."""
        return cls(np.full(N_TERRAINS, 1.0 / N_TERRAINS), PARAM_MID.copy())


@dataclass
class DRSpec:
    center: np.ndarray
    half_width: np.ndarray

    def interval(self) -> tuple[np.ndarray, np.ndarray]:
        return sampling_interval(self.center, self.half_width)


def soft_update(c_curr, c_hat, tau: float) -> np.ndarray:
    """``tau * c_curr + (1 - tau) * c_hat``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("tau must lie in [0, 1]")
    c_curr = check_simplex(c_curr, name="current terrain distribution")
    c_hat = check_simplex(c_hat, name="estimated terrain distribution")
    return tau * c_curr + (1.0 - tau) * c_hat


def apply_robot_params(c_r_hat, R_prime) -> DRSpec:
    """Set the robot parameter center directly; out-of-range estimates are clamped with a warning."""
    c = np.asarray(c_r_hat, dtype=np.float64)
    clamped = np.clip(c, PARAM_LO, PARAM_HI)
    if np.any(clamped != c):
        log.warning("robot parameter estimate %s clamped to global ranges", c)
    R_prime = np.asarray(R_prime, dtype=np.float64)
    if np.any(R_prime < 0):
        raise ConfigError("randomization half-widths must be >= 0")
    return DRSpec(clamped, R_prime)


class TestEnvironment:
    """Deployment-side view of a target environment.

    The loop only sees unlabeled trajectories from :meth:`collect` and scalar
    scores from :meth:`score`.  The target's parameters stay private.
    """

    __test__ = False  # not a pytest class

    def __init__(self, params: EnvParams, seed: int = 0):
        params.validate()
        self._params = params
        self._seed = seed

    def collect(self, policy: Callable[[np.ndarray], np.ndarray], count: int, tag) -> list:
        seeds = [[self._seed, 7, *np.atleast_1d(tag).tolist(), i] for i in range(count)]
        return rollout_batch(self._params, policy, seeds, labeled=False).records

    def score(self, ac: ActorCritic, episodes: int) -> dict:
        return evaluate(ac, self._params, episodes, seed=self._seed + 1000)


def identify(trajectories, codec, store: ReferenceStore, cfg: LoopConfig) -> dict:
    """Batch latent, retrieved estimate, decoded estimate and their fusion."""
    trajs = [Trajectory(np.asarray(t.obs), np.asarray(t.actions)) for t in trajectories]
    if not trajs:
        raise ConfigError("no deployment trajectories to identify from")
    Z = np.stack([v.z for v in codec.encode_many(trajs)])
    z = Z.mean(axis=0)
    z = z / np.linalg.norm(z)
    retr = knn_retrieve(store, z, min(cfg.neighbors, len(store)))
    ml = codec.predict_params(z)
    fused: FusedParams = fuse(retr, ml, cfg.alpha)
    return {"z": z, "retrieved": retr, "decoded": ml, "fused": fused}


def adaptation_loop(cfg: LoopConfig, policy: ActorCritic, codec, store: ReferenceStore, test_env: TestEnvironment,
                    ppo_cfg: PPOConfig | None = None, R=FULL_RANGE,
                    metrics_sink: Callable[[dict], None] | None = None) -> tuple[ActorCritic, list]:
    """Run ``cfg.loops`` adaptation loops; returns the trained policy and per-loop records.

    ``policy`` is updated in place by continual training.
    """
    cfg.validate()
    if policy is None or codec is None or store is None or test_env is None:
        raise ConfigError("adaptation needs a policy, a codec, a reference store and a test environment")
    if len(store) == 0:
        raise ConfigError("reference store is empty")
    ppo_cfg = ppo_cfg or policy.cfg
    R_prime = LoopConfig.continual_range(R)
    cur = CurrentParams.initial()
    deployed = policy.clone()
    trainer = None
    records = []
    rng = np.random.default_rng([cfg.seed, 21])
    for loop in range(cfg.loops):
        if cfg.stochastic_deployment:
            act = deployed.stochastic_policy(rng)
        else:
            act = deployed.deterministic_policy()
        batch = test_env.collect(act, cfg.trajectories_per_batch, [cfg.seed, loop])
        est = identify(batch, codec, store, cfg)
        fused = est["fused"]
        cur = CurrentParams(soft_update(cur.c_e, fused.c_e, cfg.tau), apply_robot_params(fused.c_r, R_prime).center)
        env_params = EnvParams(cur.c_e, RobotParams.from_array(cur.c_r), R_prime)
        if trainer is None:
            trainer = PPOTrainer(policy, env_params, ppo_cfg, seed=[cfg.seed, 22])
        else:
            trainer.set_env_params(env_params)
        last_stats = {}
        for _ in range(cfg.iterations_per_episode):
            last_stats = trainer.iterate()
        redeployed = (loop + 1) % cfg.episodes_per_redeploy == 0
        if redeployed:
            deployed = policy.clone()
        ev = test_env.score(policy, cfg.eval_episodes)
        rec = {
            "loop": loop,
            "config": asdict(cfg),
            "retrieved_c_e": est["retrieved"][0].tolist(),
            "retrieved_c_r": est["retrieved"][1].tolist(),
            "decoded_c_e": est["decoded"][0].tolist(),
            "decoded_c_r": est["decoded"][1].tolist(),
            "fused_c_e": fused.c_e.tolist(),
            "fused_c_r": fused.c_r.tolist(),
            "current_c_e": cur.c_e.tolist(),
            "current_c_r": cur.c_r.tolist(),
            "train_mean_reward": last_stats.get("mean_reward"),
            "redeployed": redeployed,
            "eval": ev,
        }
        records.append(rec)
        log.info("loop %d: c_e=%s c_r=%s eval=%.4f", loop, np.round(cur.c_e, 3), np.round(cur.c_r, 3),
                 ev["mean_reward"])
        if metrics_sink is not None:
            metrics_sink(rec)
    return policy, records


def train_origin(policy: ActorCritic, iterations: int, seed: int, ppo_cfg: PPOConfig | None = None) -> ActorCritic:
    """Baseline: the same budget of continued training under the pretraining randomization."""
    ac = policy.clone()
    if iterations:
        trainer = PPOTrainer(ac, EnvParams.pretraining(), ppo_cfg or ac.cfg, seed=[seed, 23])
        for _ in range(iterations):
            trainer.iterate()
    return ac


def train_expert(target: EnvParams, iterations: int, seed: int, ppo_cfg: PPOConfig | None = None) -> ActorCritic:
    """Reference policy trained from scratch directly on the target environment."""
    cfg = ppo_cfg or PPOConfig()
    ac = ActorCritic(cfg, seed=seed + 7)
    train_policy(ac, target, iterations, seed=seed + 24)
    return ac
