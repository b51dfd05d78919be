"""Run configuration and the experiment pipelines behind the command line.

A run directory holds::

    config.json              resolved configuration (every default spelled out)
    dataset.lsrt             labeled pretraining trajectories
    checkpoints/policy.lsrw  pretrained policy
    checkpoints/codec.lsrw   trained trajectory codec
    store/reference.lsrs     reference latent set
    metrics/*.jsonl, *.csv   metrics and tables
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from loopsr.errors import ConfigError, MissingArtifactError
from loopsr.latentstore import (
    ReferenceStore,
    build_reference,
    knn_retrieve,
    knn_terrain,
    load_store,
    save_store,
)
from loopsr.loopctl import (
    CurrentParams,
    LoopConfig,
    TestEnvironment,
    adaptation_loop,
    apply_robot_params,
    identify,
    soft_update,
    train_expert,
    train_origin,
)
from loopsr.mdpgap import SweepConfig
from loopsr.ppo import ActorCritic, PPOConfig, collect_labeled, evaluate, pretrain
from loopsr.terrasim import (
    DIFFICULTIES,
    FULL_RANGE,
    PARAM_HI,
    PARAM_LO,
    EnvParams,
    RobotParams,
    TerrainType,
    load_dataset,
    save_dataset,
)
from loopsr.trajcodec import EncoderConfig, TrajCodec, train_encoder

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TERRAIN_NAMES = {t.name.lower(): int(t) for t in TerrainType}


def terrain_id(name) -> int:
    if isinstance(name, int) and 0 <= name < len(TERRAIN_NAMES):
        return name
    key = str(name).lower().replace("-", "_")
    if key not in TERRAIN_NAMES:
        raise ConfigError(f"unknown terrain {name!r}; choose from {sorted(TERRAIN_NAMES)}")
    return TERRAIN_NAMES[key]


@dataclass
class TestEnvConfig:
    terrain: str = "stairs"
    difficulty: float = 0.9
    robot: tuple = (1.3, 0.5, 0.7, 0.0)
    seed: int = 0

    def validate(self) -> None:
        terrain_id(self.terrain)
        if self.difficulty not in DIFFICULTIES:
            raise ConfigError(f"difficulty must be one of {DIFFICULTIES}")
        if len(self.robot) != 4:
            raise ConfigError("robot needs 4 values (mass, friction, motor_strength, restitution)")
        RobotParams(*self.robot).validate()

    def env_params(self) -> EnvParams:
        return EnvParams.fixed(terrain_id(self.terrain), self.difficulty, RobotParams(*self.robot))


@dataclass
class EvalConfig:
    episodes: int = 32
    expert: bool = True

    def validate(self) -> None:
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")


@dataclass
class AblateConfig:
    envs_per_terrain: int = 12
    identification_steps: int = 10
    held_out_rounds: int = 8

    def validate(self) -> None:
        if min(self.envs_per_terrain, self.identification_steps, self.held_out_rounds) < 1:
            raise ConfigError("ablation sizes must be positive")


SECTIONS = {
    "ppo": PPOConfig,
    "encoder": EncoderConfig,
    "loop": LoopConfig,
    "theory": SweepConfig,
    "eval": EvalConfig,
    "test_env": TestEnvConfig,
    "ablate": AblateConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    ppo: PPOConfig = field(default_factory=PPOConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    theory: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    test_env: TestEnvConfig = field(default_factory=TestEnvConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    schema_version: int = SCHEMA_VERSION

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate the run seed into every section."""
        self.seed = int(seed)
        for name in ("ppo", "encoder", "loop", "theory", "test_env"):
            getattr(self, name).seed = self.seed
        return self

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ConfigError as exc:
                raise ConfigError(f"{name}: {exc}") from None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))


def _section_from_dict(name: str, cls, doc) -> object:
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in fields:
            raise ConfigError(f"unknown key '{name}.{key}'")
    kwargs = {}
    for key, value in doc.items():
        default = fields[key].default
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key}: expected a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key}: expected true/false")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key}: expected a number")
            if isinstance(default, int) and not float(value).is_integer():
                raise ConfigError(f"{name}.{key}: expected an integer")
            value = type(default)(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    allowed = {"seed", "schema_version", *SECTIONS}
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}'")
    cfg = RunConfig(
        schema_version=doc.get("schema_version", SCHEMA_VERSION),
        **{name: _section_from_dict(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()},
    )
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    cfg.with_seed(seed)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


# -- run directory helpers -------------------------------------------------------


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.json")
    dataset = property(lambda self: self.root / "dataset.lsrt")
    policy = property(lambda self: self.root / "checkpoints" / "policy.lsrw")
    codec = property(lambda self: self.root / "checkpoints" / "codec.lsrw")
    store = property(lambda self: self.root / "store" / "reference.lsrs")
    metrics = property(lambda self: self.root / "metrics")

    def create(self) -> None:
        for sub in ("checkpoints", "store", "metrics"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def require(self, *names) -> None:
        for name in names:
            path = getattr(self, name)
            if not path.exists():
                raise MissingArtifactError(f"missing artifact '{name}': {path}")

    def write_config(self, cfg: RunConfig) -> None:
        self.config.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def read_config(self) -> RunConfig:
        self.require("config")
        return config_from_dict(json.loads(self.config.read_text()))


class JsonLines:
    """Append-only JSON-lines sink (truncates the file when opened)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# -- pipelines -------------------------------------------------------------------


def run_pretrain(cfg: RunConfig, out) -> dict:
    """Pretrain the policy, train the codec, build the reference store."""
    rd = RunDir(out)
    rd.create()
    rd.write_config(cfg)
    res = pretrain(cfg.ppo, metrics_sink=JsonLines(rd.metrics / "pretrain.jsonl"))
    res.policy.save(rd.policy)
    save_dataset(res.dataset, rd.dataset)
    codec, history = train_encoder(res.dataset, cfg.encoder, metrics_sink=JsonLines(rd.metrics / "codec.jsonl"))
    codec.save(rd.codec)
    store = build_reference(res.dataset, codec)
    save_store(store, rd.store)
    return {"policy": res.policy, "dataset": res.dataset, "codec": codec, "store": store, "codec_history": history}


def load_artifacts(rd: RunDir, cfg: RunConfig, need=("policy", "codec", "store")) -> dict:
    rd.require(*need)
    out = {}
    if "policy" in need:
        out["policy"] = ActorCritic.load(rd.policy, cfg.ppo)
    if "codec" in need:
        out["codec"] = TrajCodec.load(rd.codec, cfg.encoder)
    if "store" in need:
        out["store"] = load_store(rd.store)
    if "dataset" in need:
        out["dataset"] = load_dataset(rd.dataset)
    return out


SUMMARY_COLUMNS = ["terrain", "difficulty", "origin_reward", "adapted_reward", "expert_reward"]


def run_adapt(cfg: RunConfig, out, test_env: TestEnvironment | None = None) -> dict:
    """Adaptation loops on the test environment plus the Origin and Expert references."""
    rd = RunDir(out)
    art = load_artifacts(rd, cfg)
    target = cfg.test_env.env_params()
    test_env = test_env or TestEnvironment(target, seed=cfg.test_env.seed)
    adapted, records = adaptation_loop(cfg.loop, art["policy"].clone(), art["codec"], art["store"], test_env,
                                       cfg.ppo, metrics_sink=JsonLines(rd.metrics / "adapt.jsonl"))
    adapted.save(rd.root / "checkpoints" / "adapted.lsrw")
    budget = cfg.loop.loops * cfg.loop.iterations_per_episode
    origin = train_origin(art["policy"], budget, cfg.seed, cfg.ppo)
    origin.save(rd.root / "checkpoints" / "origin.lsrw")
    row = {
        "terrain": cfg.test_env.terrain,
        "difficulty": cfg.test_env.difficulty,
        "origin_reward": test_env.score(origin, cfg.eval.episodes)["mean_reward"],
        "adapted_reward": test_env.score(adapted, cfg.eval.episodes)["mean_reward"],
        "expert_reward": "",
    }
    if cfg.eval.expert:
        expert = train_expert(target, cfg.ppo.iterations + budget, cfg.seed, cfg.ppo)
        expert.save(rd.root / "checkpoints" / "expert.lsrw")
        row["expert_reward"] = test_env.score(expert, cfg.eval.episodes)["mean_reward"]
    with open(rd.metrics / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return {"records": records, "summary": row}


def run_eval(cfg: RunConfig, out) -> dict:
    """Evaluate every policy checkpoint present in the run directory on the test environment."""
    rd = RunDir(out)
    rd.require("policy")
    target = cfg.test_env.env_params()
    results = {}
    for name in ("policy", "adapted", "origin", "expert"):
        path = rd.root / "checkpoints" / f"{name}.lsrw"
        if path.exists():
            ac = ActorCritic.load(path, cfg.ppo)
            results[name] = evaluate(ac, target, cfg.eval.episodes, seed=cfg.test_env.seed + 1000)
    doc = {"test_env": asdict(cfg.test_env), "results": results}
    rd.metrics.mkdir(parents=True, exist_ok=True)
    (rd.metrics / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n")
    return doc


# -- identification ablation -------------------------------------------------------

VARIANTS = ("LSR", "LSR-w/o-con", "LSR-w/o-AE", "LSR-w/o-su")
TABLE_ROWS = ("Slope", "Stair", "Plain", "Friction", "Mass")
_ROW_TERRAINS = {"Slope": (TerrainType.SLOPE_UP, TerrainType.SLOPE_DOWN), "Stair": (TerrainType.STAIRS,),
                 "Plain": (TerrainType.FLAT,)}


def held_out_set(policy: ActorCritic, rounds: int, seed: int) -> list:
    """Labeled trajectories from fresh seeds under the pretraining randomization."""
    return collect_labeled(policy, EnvParams.pretraining(), policy.cfg.envs, rounds, [seed, 31], 0)


def trajectory_identification(codec: TrajCodec, store: ReferenceStore, records, neighbors: int, alpha: float) -> dict:
    """Per-trajectory kNN terrain accuracy and fused robot-parameter errors (fraction of half-width)."""
    lat = codec.encode_many([r.trajectory for r in records])
    Z = np.stack([v.z for v in lat])
    truth = np.array([r.label.terrain for r in records])
    pred = knn_terrain(store, Z, neighbors)
    _, cr_retr = knn_retrieve(store, Z, neighbors)
    _, cr_ml = codec.predict_params(Z)
    c_r = np.clip(alpha * cr_retr + (1 - alpha) * cr_ml, PARAM_LO, PARAM_HI)
    robot = np.stack([r.label.robot for r in records])
    err = np.abs(c_r - robot) / FULL_RANGE
    per_terrain = {TerrainType(k).name.lower(): float(np.mean(pred[truth == k] == k))
                   for k in range(len(TerrainType)) if np.any(truth == k)}
    return {
        "accuracy": float(np.mean(pred == truth)),
        "per_terrain": per_terrain,
        "predicted": pred,
        "truth": truth,
        "robot_error": err.mean(axis=0),
    }


def loop_identification(policy: ActorCritic, codec: TrajCodec, store: ReferenceStore, loop: LoopConfig,
                        tau: float, envs_per_terrain: int, steps: int, seed: int) -> dict:
    """Identification as the adaptation loop runs it, without the training phase.

    For each held-out environment, ``steps`` batches are collected with the
    pretrained policy and folded into the current estimate with soft update
    ratio ``tau``.  Returns per-terrain accuracy of ``argmax c_e`` and mean
    normalized robot-parameter errors, averaged over all steps.
    """
    rng = np.random.default_rng([seed, 41])
    hits = {int(t): [] for t in TerrainType}
    errs = []
    for t in TerrainType:
        for e in range(envs_per_terrain):
            d = DIFFICULTIES[e % len(DIFFICULTIES)]
            robot = RobotParams(*(PARAM_LO + (PARAM_HI - PARAM_LO) * rng.uniform(size=4)))
            env = TestEnvironment(EnvParams.fixed(int(t), d, robot), seed=seed * 1000 + int(t) * 100 + e)
            cur = CurrentParams.initial()
            act_rng = np.random.default_rng([seed, 42, int(t), e])
            for k in range(steps):
                batch = env.collect(policy.stochastic_policy(act_rng), loop.trajectories_per_batch, [k])
                fused = identify(batch, codec, store, loop)["fused"]
                cur = CurrentParams(soft_update(cur.c_e, fused.c_e, tau),
                                    apply_robot_params(fused.c_r, LoopConfig.continual_range()).center)
                hits[int(t)].append(int(np.argmax(cur.c_e)) == int(t))
                errs.append(np.abs(cur.c_r - robot.as_array()) / FULL_RANGE)
    err = np.mean(errs, axis=0)
    return {
        "per_terrain": {TerrainType(k).name.lower(): float(np.mean(v)) for k, v in hits.items()},
        "accuracy": float(np.mean([h for v in hits.values() for h in v])),
        "robot_error": err,
    }


def table_column(ident: dict) -> dict:
    per = ident["per_terrain"]
    col = {}
    for row, terrains in _ROW_TERRAINS.items():
        col[row] = float(np.mean([per[TerrainType(t).name.lower()] for t in terrains]))
    col["Friction"] = float(ident["robot_error"][1])
    col["Mass"] = float(ident["robot_error"][0])
    return col


def run_ablate(cfg: RunConfig, out) -> dict:
    """Identification table: 5 rows (Slope/Stair/Plain accuracy, Friction/Mass error) x 4 variants."""
    rd = RunDir(out)
    art = load_artifacts(rd, cfg, need=("policy", "codec", "store", "dataset"))
    dataset, policy = art["dataset"], art["policy"]
    codecs = {"LSR": (art["codec"], art["store"])}
    for name, override in (("LSR-w/o-con", {"lambda_con": 0.0}), ("LSR-w/o-AE", {"lambda_recon": 0.0})):
        ecfg = dataclasses.replace(cfg.encoder, **override)
        slug = name[4:].replace("/", "")  # "wo-con", "wo-AE"
        codec, _ = train_encoder(dataset, ecfg, metrics_sink=JsonLines(rd.metrics / f"codec_{slug}.jsonl"))
        codecs[name] = (codec, build_reference(dataset, codec))
    codecs["LSR-w/o-su"] = codecs["LSR"]
    held = held_out_set(policy, cfg.ablate.held_out_rounds, cfg.seed)
    columns, per_traj = {}, {}
    for name in VARIANTS:
        codec, store = codecs[name]
        tau = 0.0 if name == "LSR-w/o-su" else cfg.loop.tau
        ident = loop_identification(policy, codec, store, cfg.loop, tau, cfg.ablate.envs_per_terrain,
                                    cfg.ablate.identification_steps, cfg.seed)
        columns[name] = table_column(ident)
        if name != "LSR-w/o-su":
            t = trajectory_identification(codec, store, held, cfg.loop.neighbors, cfg.loop.alpha)
            per_traj[name] = {"accuracy": t["accuracy"], "per_terrain": t["per_terrain"],
                              "robot_error": t["robot_error"].tolist()}
    with open(rd.metrics / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", *VARIANTS])
        for row in TABLE_ROWS:
            w.writerow([row, *(repr(columns[v][row]) for v in VARIANTS)])
    doc = {"table": columns, "per_trajectory": per_traj}
    (rd.metrics / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def env_threads() -> int | None:
    raw = os.environ.get("LSR_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LSR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"LSR_THREADS must be a positive integer, got {raw!r}")
    return n
