"""Partially observable 1-D locomotion simulator with five terrain families.

A robot of mass ``m`` pushes with force ``F_MAX * motor_strength * u`` against
viscous friction and gravity along the local grade.  The policy sees only a
noisy velocity, the previous acceleration, the previous command and a stair
contact flag; terrain identity, position and robot parameters stay hidden and
are exposed separately as the critic's privileged state.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, NamedTuple

import numpy as np

from loopsr import kernels
from loopsr.binio import Reader, f64_bytes, read_header
from loopsr.errors import ConfigError, FormatError, UsageError


class TerrainType(IntEnum):
    FLAT = 0
    SLOPE_UP = 1
    SLOPE_DOWN = 2
    STAIRS = 3
    ROUGH = 4


N_TERRAINS = len(TerrainType)
DIFFICULTIES = (0.3, 0.6, 0.9)
EPISODE_STEPS = 200
OBS_DIM = 4
ACT_DIM = 1
PRIV_DIM = 15
NOISE_STD = 0.01
TARGET_VELOCITY = 1.0

PARAM_NAMES = ("mass", "friction", "motor_strength", "restitution")
PARAM_LO = np.array([0.7, 0.2, 0.7, 0.0])
PARAM_HI = np.array([1.3, 1.0, 1.3, 0.5])
PARAM_MID = (PARAM_LO + PARAM_HI) / 2
FULL_RANGE = (PARAM_HI - PARAM_LO) / 2


@dataclass(frozen=True)
class RobotParams:
    mass: float
    friction: float
    motor_strength: float
    restitution: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mass, self.friction, self.motor_strength, self.restitution], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "RobotParams":
        a = np.asarray(a, dtype=np.float64)
        return cls(*(float(v) for v in a))

    @classmethod
    def midpoint(cls) -> "RobotParams":
        return cls.from_array(PARAM_MID)

    def validate(self) -> None:
        a = self.as_array()
        if not np.all(np.isfinite(a)) or np.any(a < PARAM_LO) or np.any(a > PARAM_HI):
            raise ConfigError(f"robot parameters {a.tolist()} outside global ranges")


def normalize_params(c_r) -> np.ndarray:
    """Map robot parameters from their global ranges onto ``[-1, 1]``."""
    return (np.asarray(c_r, dtype=np.float64) - PARAM_MID) / FULL_RANGE


def check_simplex(p, tol: float = 1e-9, name: str = "terrain distribution") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (N_TERRAINS,) or not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise ConfigError(f"{name} {p.tolist()} is not a probability vector over {N_TERRAINS} terrains")
    return p


def one_hot(terrain: int, eps: float = 0.0) -> np.ndarray:
    """One-hot terrain vector, optionally smoothed so every entry is at least ``eps / 5``."""
    v = np.full(N_TERRAINS, eps / N_TERRAINS)
    v[int(terrain)] += 1.0 - eps
    return v


@dataclass
class EnvParams:
    """Simulation parameters ``c = (c_e, c_r)`` plus randomization half-widths.

    ``difficulty=None`` draws the difficulty uniformly from :data:`DIFFICULTIES`
    for each episode.
    """

    terrain_dist: np.ndarray
    robot: RobotParams
    dr_range: np.ndarray = field(default_factory=lambda: np.zeros(4))
    difficulty: float | None = None

    def __post_init__(self):
        self.terrain_dist = np.asarray(self.terrain_dist, dtype=np.float64)
        self.dr_range = np.asarray(self.dr_range, dtype=np.float64)

    def validate(self) -> None:
        check_simplex(self.terrain_dist)
        self.robot.validate()
        R = self.dr_range
        if R.shape != (4,) or not np.all(np.isfinite(R)) or np.any(R < 0) or np.any(R > FULL_RANGE + 1e-12):
            raise ConfigError(f"randomization range {R.tolist()} invalid")
        if self.difficulty is not None and self.difficulty not in DIFFICULTIES:
            raise ConfigError(f"difficulty {self.difficulty} not in {DIFFICULTIES}")

    @classmethod
    def pretraining(cls) -> "EnvParams":
        """Uniform terrains, midpoint robot, randomization over the full global ranges."""
        return cls(np.full(N_TERRAINS, 1.0 / N_TERRAINS), RobotParams.midpoint(), FULL_RANGE.copy())

    @classmethod
    def fixed(cls, terrain: int, difficulty: float, robot: RobotParams) -> "EnvParams":
        return cls(one_hot(terrain), robot, np.zeros(4), difficulty)


def sampling_interval(c_r, R) -> tuple[np.ndarray, np.ndarray]:
    """``c_r +/- R`` truncated at the global parameter bounds."""
    c_r, R = np.asarray(c_r, dtype=np.float64), np.asarray(R, dtype=np.float64)
    return np.maximum(c_r - R, PARAM_LO), np.minimum(c_r + R, PARAM_HI)


@dataclass(frozen=True)
class Realization:
    """Everything sampled when an environment instance is built."""

    terrain: int
    difficulty: float
    robot: np.ndarray
    field_seed: int
    noise: np.ndarray  # (EPISODE_STEPS + 1, 2) observation noise on v and a_prev


def realize(params: EnvParams, seed) -> Realization:
    params.validate()
    rng = np.random.default_rng(seed)
    terrain = int(rng.choice(N_TERRAINS, p=params.terrain_dist))
    d = params.difficulty if params.difficulty is not None else DIFFICULTIES[int(rng.integers(len(DIFFICULTIES)))]
    lo, hi = sampling_interval(params.robot.as_array(), params.dr_range)
    robot = lo + (hi - lo) * rng.uniform(size=4)
    field_seed = int(rng.integers(0, 2**63 - 1))
    noise = rng.normal(0.0, NOISE_STD, size=(EPISODE_STEPS + 1, 2))
    return Realization(terrain, float(d), robot, field_seed, noise)


def slope_at(terrain: int, difficulty: float, x: float, field_seed: int = 0) -> float:
    return float(kernels.slope_batch(np.int8(terrain), difficulty, x, np.uint64(field_seed)))


@dataclass
class EnvState:
    x: float
    v: float
    a_prev: float
    u_prev: float
    t: int
    seed: object
    terrain: int
    robot: np.ndarray


class VecEnv:
    """Synchronous batch of independent environment instances.

    All instances start together and run fixed-length episodes, so they finish
    on the same step.  ``reset`` takes one seed per instance.
    """

    def __init__(self, params, n: int | None = None):
        if isinstance(params, EnvParams):
            if n is None:
                raise ConfigError("n is required with a single EnvParams")
            params = [params] * n
        self.params = list(params)
        self.n = len(self.params)
        for p in self.params:
            p.validate()
        self.t = None

    def reset(self, seeds) -> np.ndarray:
        if len(seeds) != self.n:
            raise ConfigError(f"expected {self.n} seeds, got {len(seeds)}")
        self.seeds = list(seeds)
        self.real = [realize(p, s) for p, s in zip(self.params, seeds)]
        self.terrain = np.array([r.terrain for r in self.real], dtype=np.int8)
        self.difficulty = np.array([r.difficulty for r in self.real])
        self.robot = np.stack([r.robot for r in self.real])
        self.field_seed = np.array([r.field_seed for r in self.real], dtype=np.uint64)
        self.noise = np.stack([r.noise for r in self.real], axis=1)  # (T+1, n, 2)
        self._mass = np.ascontiguousarray(self.robot[:, 0])
        self._fric = np.ascontiguousarray(self.robot[:, 1])
        self._motor = np.ascontiguousarray(self.robot[:, 2])
        self._rest = np.ascontiguousarray(self.robot[:, 3])
        self._norm = normalize_params(self.robot)
        self._onehot = np.eye(N_TERRAINS)[self.terrain]
        self.x = np.zeros(self.n)
        self.v = np.zeros(self.n)
        self.a_prev = np.zeros(self.n)
        self.u_prev = np.zeros(self.n)
        self.contact = np.zeros(self.n, dtype=np.uint8)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        nz = self.noise[self.t]
        return np.stack([self.v + nz[:, 0], self.a_prev + nz[:, 1], self.u_prev, self.contact.astype(np.float64)], axis=1)

    def privileged(self, obs: np.ndarray | None = None) -> np.ndarray:
        obs = self.observe() if obs is None else obs
        slope = kernels.slope_batch(self.terrain, self.difficulty, self.x, self.field_seed)
        return np.concatenate([obs, self._onehot, slope[:, None], self._norm, self.v[:, None]], axis=1)

    def step(self, u):
        """Apply commands ``u`` (clamped to [-1, 1]); returns ``(obs, reward, done, privileged)``."""
        if self.t is None:
            raise UsageError("reset() must be called before step()")
        if self.t >= EPISODE_STEPS:
            raise UsageError("episode is done; call reset()")
        u = np.clip(np.asarray(u, dtype=np.float64).reshape(self.n), -1.0, 1.0)
        acc, contact, _ = kernels.physics_step(
            self.x, self.v, u, self.terrain, self.difficulty,
            self._mass, self._fric, self._motor, self._rest, self.field_seed,
        )
        self.a_prev = acc
        self.u_prev = u
        self.contact = contact
        self.t += 1
        reward = np.exp(-((self.v - TARGET_VELOCITY) ** 2) / 0.25) - 0.01 * u * u
        obs = self.observe()
        done = np.full(self.n, self.t >= EPISODE_STEPS)
        return obs, reward, done, self.privileged(obs)


class EnvInstance:
    """Single environment with the scalar step interface."""

    def __init__(self, params: EnvParams, seed):
        self._vec = VecEnv([params])
        self.params = params
        self.seed = seed
        self.obs = self._vec.reset([seed])[0]
        self.done = False

    @property
    def realization(self) -> Realization:
        return self._vec.real[0]

    @property
    def state(self) -> EnvState:
        e = self._vec
        return EnvState(float(e.x[0]), float(e.v[0]), float(e.a_prev[0]), float(e.u_prev[0]), e.t,
                        self.seed, int(e.terrain[0]), e.robot[0].copy())

    def privileged(self) -> np.ndarray:
        return self._vec.privileged()[0]

    def step(self, u: float):
        if self.done:
            raise UsageError("step() called after the episode finished")
        obs, reward, done, priv = self._vec.step(np.array([u]))
        self.obs, self.done = obs[0], bool(done[0])
        return self.state, obs[0], float(reward[0]), self.done, priv[0]


def make_env(params: EnvParams, seed) -> EnvInstance:
    return EnvInstance(params, seed)


@dataclass
class TrajectoryLabel:
    terrain: int
    difficulty: float
    robot: np.ndarray
    checkpoint_id: int


class Trajectory(NamedTuple):
    """Reward-free, label-free view ``(o_1..o_{n+1}, a_1..a_n)`` consumed by the encoder."""

    obs: np.ndarray
    actions: np.ndarray

    @property
    def n(self) -> int:
        return len(self.actions)


@dataclass
class TrajectoryRecord:
    obs: np.ndarray  # (n + 1, OBS_DIM)
    actions: np.ndarray  # (n, ACT_DIM)
    label: TrajectoryLabel | None = None

    @property
    def n(self) -> int:
        return len(self.actions)

    @property
    def obs_t(self) -> np.ndarray:
        return self.obs[:-1]

    @property
    def next_obs(self) -> np.ndarray:
        return self.obs[1:]

    def triples(self):
        return self.obs[:-1], self.actions, self.obs[1:]

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(self.obs, self.actions)


@dataclass
class RolloutResult:
    records: list
    rewards: np.ndarray  # (n_envs, T)
    privileged: np.ndarray  # (n_envs, T, PRIV_DIM), state before each action


def rollout_batch(params, policy: Callable[[np.ndarray], np.ndarray], seeds, T: int = EPISODE_STEPS,
                  checkpoint_id: int | None = None, labeled: bool = True) -> RolloutResult:
    """Run ``policy`` for ``T`` steps in one instance per seed.

    ``policy`` maps an ``(n, OBS_DIM)`` observation batch to ``n`` commands.
    """
    if T < 1 or T > EPISODE_STEPS:
        raise ConfigError(f"rollout length {T} outside [1, {EPISODE_STEPS}]")
    env = VecEnv(params, len(seeds)) if isinstance(params, EnvParams) else VecEnv(params)
    obs = env.reset(seeds)
    n = env.n
    all_obs = np.empty((T + 1, n, OBS_DIM))
    acts = np.empty((T, n, ACT_DIM))
    rewards = np.empty((T, n))
    priv = np.empty((T, n, PRIV_DIM))
    all_obs[0] = obs
    for t in range(T):
        priv[t] = env.privileged(obs)
        u = np.clip(np.asarray(policy(obs), dtype=np.float64).reshape(n), -1.0, 1.0)
        obs, r, _, _ = env.step(u)
        acts[t, :, 0] = u
        all_obs[t + 1] = obs
        rewards[t] = r
    records = []
    for i in range(n):
        label = None
        if labeled:
            label = TrajectoryLabel(int(env.terrain[i]), float(env.difficulty[i]), env.robot[i].copy(),
                                    -1 if checkpoint_id is None else int(checkpoint_id))
        records.append(TrajectoryRecord(all_obs[:, i].copy(), acts[:, i].copy(), label))
    return RolloutResult(records, rewards.T.copy(), priv.transpose(1, 0, 2).copy())


def rollout(env: EnvInstance, policy: Callable[[np.ndarray], float], T: int = EPISODE_STEPS,
            checkpoint_id: int | None = None):
    """Roll a fresh single instance; returns ``(record, rewards, privileged_states)``."""
    if env.state.t != 0:
        raise UsageError("rollout needs a fresh environment")
    obs = [env.obs.copy()]
    acts, rewards, priv = [], [], []
    for _ in range(T):
        priv.append(env.privileged())
        u = float(np.clip(policy(env.obs), -1.0, 1.0))
        _, o, r, _, _ = env.step(u)
        obs.append(o.copy())
        acts.append([u])
        rewards.append(r)
    real = env.realization
    label = TrajectoryLabel(real.terrain, real.difficulty, real.robot.copy(),
                            -1 if checkpoint_id is None else int(checkpoint_id))
    return TrajectoryRecord(np.array(obs), np.array(acts), label), np.array(rewards), np.array(priv)


# -- trajectory dataset files ("LSRT") --------------------------------------

TRAJ_MAGIC = b"LSRT"
TRAJ_VERSION = 1
_NO_CHECKPOINT = 0xFFFFFFFF


def dumps_dataset(records) -> bytes:
    out = [TRAJ_MAGIC, struct.pack("<II", TRAJ_VERSION, len(records))]
    for rec in records:
        n, od = rec.obs.shape[0] - 1, rec.obs.shape[1]
        ad = rec.actions.shape[1]
        out.append(struct.pack("<III", n, od, ad))
        out.append(f64_bytes(rec.obs))
        out.append(f64_bytes(rec.actions))
        lab = rec.label
        if lab is None:
            out.append(b"\x00")
        else:
            ck = _NO_CHECKPOINT if lab.checkpoint_id < 0 else lab.checkpoint_id
            out.append(b"\x01" + struct.pack("<Bd", lab.terrain, lab.difficulty) + f64_bytes(lab.robot)
                       + struct.pack("<I", ck))
    return b"".join(out)


def loads_dataset(buf: bytes) -> list:
    r = Reader(buf)
    read_header(r, TRAJ_MAGIC, TRAJ_VERSION)
    records = []
    for _ in range(r.unpack("I")):
        n, od, ad = r.unpack("III")
        obs = r.f64((n + 1) * od).reshape(n + 1, od)
        acts = r.f64(n * ad).reshape(n, ad)
        flag = r.unpack("B")
        label = None
        if flag == 1:
            terrain, diff = r.unpack("Bd")
            robot = r.f64(4)
            ck = r.unpack("I")
            label = TrajectoryLabel(terrain, diff, robot, -1 if ck == _NO_CHECKPOINT else ck)
        elif flag != 0:
            raise FormatError(f"bad label flag {flag}")
        records.append(TrajectoryRecord(obs, acts, label))
    r.expect_end()
    return records


def save_dataset(records, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps_dataset(records))
    os.replace(tmp, path)


def load_dataset(path) -> list:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
