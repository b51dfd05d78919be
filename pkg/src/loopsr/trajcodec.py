"""Trajectory encoder, reconstruction decoder and parameter heads.

A causal transformer reads each timestep as three tokens ``(o_t, a_t, o_{t+1})``
sharing one timestep embedding.  The hidden state at every ``o_{t+1}`` token is
projected to a per-timestep Gaussian ``(mu_t, log_sigma_t)``; these are averaged
over timesteps and the latent is projected onto the unit sphere.

Long trajectories are processed in consecutive windows of ``context``
timesteps (training draws one random window per trajectory); the per-timestep
latents of all windows are pooled together.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from loopsr.errors import ConfigError
from loopsr.numgrad import (
    MLP,
    Adam,
    Affine,
    LayerNorm,
    NumericalError,
    ParamSet,
    Tensor,
    attention_block,
    backward,
    concat,
    init_attention_params,
    log_softmax,
    softmax,
)
from loopsr.numgrad.checkpoint import load_weights, save_weights
from loopsr.terrasim import (
    ACT_DIM,
    FULL_RANGE,
    N_TERRAINS,
    OBS_DIM,
    PARAM_HI,
    PARAM_LO,
    Trajectory,
    one_hot,
)

log = logging.getLogger(__name__)

LATENT_DIM = 32
LOG_SIGMA_MIN, LOG_SIGMA_MAX = -10.0, 2.0
# fixed input scaling so every observation channel is O(1)
OBS_SCALE = np.array([1.0, 0.25, 1.0, 1.0])


@dataclass
class EncoderConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    latent_dim: int = LATENT_DIM
    max_timesteps: int = 200
    context: int = 50
    lambda_recon: float = 1.0
    lambda_con: float = 0.5
    lambda_e: float = 0.5
    lambda_r: float = 0.5
    beta_kl: float = 1e-3
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 20
    temperature: float = 1.0
    smoothing_eps: float = 0.05
    kl_direction: str = "model_target"
    decoder_hidden: tuple = (64, 64)
    head_hidden: tuple = (64,)
    sample_at_inference: bool = False
    max_grad_norm: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim != LATENT_DIM:
            raise ConfigError(f"latent dimension is fixed at {LATENT_DIM}")
        for name in ("lambda_recon", "lambda_con", "lambda_e", "lambda_r", "beta_kl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if not 1 <= self.context <= self.max_timesteps:
            raise ConfigError("context must lie in [1, max_timesteps]")
        if self.kl_direction not in ("model_target", "target_model"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if self.temperature <= 0 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("temperature and batch must be positive, epochs non-negative")


@dataclass
class LatentVar:
    mu: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray


def _sigmoid(x: Tensor) -> Tensor:
    return ((x * 0.5).tanh() + 1.0) * 0.5


class TrajCodec:
    def __init__(self, cfg: EncoderConfig | None = None):
        self.cfg = cfg or EncoderConfig()
        self.cfg.validate()
        c = self.cfg
        rng = np.random.default_rng(c.seed)
        p = self.params = ParamSet()
        self.emb_obs = Affine(p, "embed.obs", OBS_DIM, c.d_model, rng)
        self.emb_act = Affine(p, "embed.act", ACT_DIM, c.d_model, rng)
        self.emb_next = Affine(p, "embed.next", OBS_DIM, c.d_model, rng)
        p["embed.pos"] = rng.normal(0.0, 0.02, size=(c.max_timesteps, c.d_model))
        for i in range(c.layers):
            init_attention_params(p, f"block{i}", c.d_model, rng)
        self.ln_f = LayerNorm(p, "ln_f", c.d_model)
        self.lat_head = Affine(p, "latent", c.d_model, 2 * c.latent_dim, rng)
        self.decoder = MLP(p, "decoder", [c.latent_dim + OBS_DIM + ACT_DIM, *c.decoder_hidden, OBS_DIM], rng,
                           activation="gelu")
        self.p_e = MLP(p, "head_e", [c.latent_dim, *c.head_hidden, N_TERRAINS], rng, activation="gelu")
        self.p_r = MLP(p, "head_r", [c.latent_dim, *c.head_hidden, 4], rng, activation="gelu")

    # -- encoder ---------------------------------------------------------------

    def tokens(self, obs_t, acts, next_obs) -> Tensor:
        """``[B, 3K, d]`` token tensor for windows of ``K`` timesteps."""
        obs_t, acts, next_obs = (np.asarray(a, dtype=np.float64) for a in (obs_t, acts, next_obs))
        B, K = obs_t.shape[:2]
        if K < 1:
            raise ConfigError("cannot tokenize an empty trajectory")
        if K > self.cfg.max_timesteps:
            raise ConfigError(f"{K} timesteps exceed max_timesteps={self.cfg.max_timesteps}")
        pos = self.params["embed.pos"][:K]
        e_o = self.emb_obs(obs_t * OBS_SCALE) + pos
        e_a = self.emb_act(acts) + pos
        e_n = self.emb_next(next_obs * OBS_SCALE) + pos
        d = self.cfg.d_model
        stacked = concat([e_o.reshape(B, K, 1, d), e_a.reshape(B, K, 1, d), e_n.reshape(B, K, 1, d)], axis=2)
        return stacked.reshape(B, 3 * K, d)

    def timestep_latents(self, obs_t, acts, next_obs) -> tuple[Tensor, Tensor]:
        """Per-timestep ``(mu, log_sigma)``, each ``[B, K, latent]``."""
        h = self.tokens(obs_t, acts, next_obs)
        B, T3, d = h.shape
        for i in range(self.cfg.layers):
            h = attention_block(h, self.params, causal=True, heads=self.cfg.heads, prefix=f"block{i}")
        h = self.ln_f(h)
        K = T3 // 3
        h_next = h.reshape(B, K, 3, d)[:, :, 2, :]
        out = self.lat_head(h_next)
        L = self.cfg.latent_dim
        return out[:, :, :L], out[:, :, L:].clip(LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    def pooled(self, obs_t, acts, next_obs) -> tuple[Tensor, Tensor]:
        mu_t, ls_t = self.timestep_latents(obs_t, acts, next_obs)
        return mu_t.mean(axis=1), ls_t.mean(axis=1)

    @staticmethod
    def to_sphere(v: Tensor) -> Tensor:
        return v / (v.square().sum(axis=-1, keepdims=True)).sqrt()

    def sample_z(self, mu: Tensor, log_sigma: Tensor, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(mu.shape)
        return self.to_sphere(mu + log_sigma.exp() * eps)

    def _windows(self, n: int, upto: int | None = None) -> list[tuple[int, int]]:
        end = n if upto is None else min(upto, n)
        K = self.cfg.context
        return [(s, min(s + K, end)) for s in range(0, end, K)]

    def encode_many(self, trajs, upto: int | None = None, rng: np.random.Generator | None = None,
                    batch_windows: int = 64) -> list[LatentVar]:
        """Encode trajectories (only ``obs`` and ``actions`` are read).

        ``upto`` restricts encoding to the first ``upto`` timesteps.  With
        ``rng`` the latent is sampled (training mode); otherwise the mean is
        projected onto the sphere.
        """
        jobs = []  # (traj index, start, stop)
        for i, tr in enumerate(trajs):
            n = len(tr.actions)
            if n == 0:
                raise ConfigError("cannot encode an empty trajectory")
            jobs += [(i, s, e) for s, e in self._windows(n, upto)]
        sums_mu = [np.zeros(self.cfg.latent_dim) for _ in trajs]
        sums_ls = [np.zeros(self.cfg.latent_dim) for _ in trajs]
        counts = [0] * len(trajs)
        by_len: dict[int, list] = {}
        for job in jobs:
            by_len.setdefault(job[2] - job[1], []).append(job)
        for K, group in sorted(by_len.items()):
            for b in range(0, len(group), batch_windows):
                chunk = group[b:b + batch_windows]
                o = np.stack([trajs[i].obs[s:e] for i, s, e in chunk])
                a = np.stack([trajs[i].actions[s:e] for i, s, e in chunk])
                nx = np.stack([trajs[i].obs[s + 1:e + 1] for i, s, e in chunk])
                mu_t, ls_t = self.timestep_latents(o, a, nx)
                for j, (i, _, _) in enumerate(chunk):
                    sums_mu[i] += mu_t.data[j].sum(axis=0)
                    sums_ls[i] += ls_t.data[j].sum(axis=0)
                    counts[i] += K
        out = []
        for i in range(len(trajs)):
            mu, ls = sums_mu[i] / counts[i], sums_ls[i] / counts[i]
            v = mu + np.exp(ls) * rng.standard_normal(mu.shape) if rng is not None else mu
            out.append(LatentVar(mu, ls, v / np.linalg.norm(v)))
        return out

    def encode(self, traj, upto: int | None = None, rng: np.random.Generator | None = None) -> LatentVar:
        return self.encode_many([traj], upto=upto, rng=rng)[0]

    # -- decoders ----------------------------------------------------------------

    def reconstruct(self, z: Tensor, obs_t, acts) -> Tensor:
        """Predicted ``o_{t+1}`` for every timestep: ``[B, K, OBS_DIM]`` in raw units."""
        obs_t, acts = np.asarray(obs_t, dtype=np.float64), np.asarray(acts, dtype=np.float64)
        B, K = obs_t.shape[:2]
        zz = z.reshape(B, 1, self.cfg.latent_dim) * np.ones((1, K, 1))
        inp = concat([zz, Tensor(obs_t * OBS_SCALE), Tensor(acts)], axis=-1)
        return self.decoder(inp) * (1.0 / OBS_SCALE)

    def terrain_probs(self, z: Tensor) -> Tensor:
        return softmax(self.p_e(z), axis=-1)

    def robot_params(self, z: Tensor) -> Tensor:
        return _sigmoid(self.p_r(z)) * (PARAM_HI - PARAM_LO) + PARAM_LO

    def predict_params(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Decoded ``(c_e, c_r)`` for one latent or a batch of latents."""
        zt = Tensor(np.atleast_2d(z))
        c_e, c_r = self.terrain_probs(zt).data, self.robot_params(zt).data
        if np.ndim(z) == 1:
            return c_e[0], c_r[0]
        return c_e, c_r

    # -- persistence --------------------------------------------------------------

    def save(self, path) -> None:
        save_weights(self.params.arrays(), path)

    @classmethod
    def load(cls, path, cfg: EncoderConfig | None = None) -> "TrajCodec":
        codec = cls(cfg)
        codec.params.load_arrays(load_weights(path))
        return codec


def tokenize(codec: TrajCodec, traj) -> Tensor:
    """``[3n, d_model]`` tokens for one trajectory, in order ``o_t, a_t, o_{t+1}`` per timestep."""
    obs, acts = np.asarray(traj.obs), np.asarray(traj.actions)
    if len(acts) == 0:
        raise ConfigError("cannot tokenize an empty trajectory")
    t = codec.tokens(obs[None, :-1], acts[None], obs[None, 1:])
    return t.reshape(t.shape[1], t.shape[2])


def encode(codec: TrajCodec, traj, upto: int | None = None) -> LatentVar:
    return codec.encode(traj, upto=upto)


# -- losses ----------------------------------------------------------------------


def recon_loss(codec: TrajCodec, z: Tensor, obs_t, acts, next_obs) -> Tensor:
    """Squared error summed over timesteps and observation components, averaged over the batch."""
    pred = codec.reconstruct(z, obs_t, acts)
    err = pred - np.asarray(next_obs, dtype=np.float64)
    return err.square().sum() * (1.0 / pred.shape[0])


def contrastive_loss(Z: Tensor, labels, temperature: float = 1.0) -> tuple[Tensor, bool]:
    """Supervised InfoNCE over a batch of unit latents.

    Returns ``(loss, no_positives)``; when no anchor has a positive the loss is
    zero and the flag is set.
    """
    labels = np.asarray(labels)
    N = Z.shape[0]
    if N < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2")
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(N, dtype=bool)
    pos = same & off_diag
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        return Tensor(0.0), True
    logits = (Z @ Z.transpose(1, 0)) * (1.0 / temperature)
    # log-softmax over j != i: mask the diagonal with a large negative constant
    masked = logits + np.where(off_diag, 0.0, -1e9)
    logp = log_softmax(masked, axis=1)
    w = np.where(pos, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0)
    per_anchor = -(logp * w).sum(axis=1)
    loss = (per_anchor * anchors.astype(np.float64)).sum() * (1.0 / anchors.sum())
    return loss, False


def head_losses(codec: TrajCodec, z: Tensor, c_e, c_r, R=None, kl_direction: str | None = None):
    """``(L_e, L_r)``: KL between decoded and target terrain distributions; range-normalized L1 on robot params."""
    c_e = np.atleast_2d(np.asarray(c_e, dtype=np.float64))
    c_r = np.atleast_2d(np.asarray(c_r, dtype=np.float64))
    R = FULL_RANGE if R is None else np.asarray(R, dtype=np.float64)
    if np.any(c_e <= 0):
        raise ConfigError("target terrain distribution needs strictly positive entries (smooth it)")
    if np.any(R <= 0):
        raise ConfigError("randomization half-widths must be positive")
    direction = kl_direction or codec.cfg.kl_direction
    logits = codec.p_e(z)
    logp = log_softmax(logits, axis=-1)
    B = c_e.shape[0]
    if direction == "model_target":
        p = logp.exp()
        L_e = (p * (logp - np.log(c_e))).sum() * (1.0 / B)
    else:
        L_e = (Tensor(c_e) * (np.log(c_e) - logp)).sum() * (1.0 / B)
    pr = codec.robot_params(z)
    L_r = ((pr - c_r).abs() * (1.0 / R)).mean()
    return L_e, L_r


def prior_kl(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma) || N(0, I)) averaged over the batch."""
    B = mu.shape[0]
    per = mu.square() + (log_sigma * 2.0).exp() - 1.0 - log_sigma * 2.0
    return per.sum() * (0.5 / B)


@dataclass
class Batch:
    obs_t: np.ndarray
    acts: np.ndarray
    next_obs: np.ndarray
    terrain: np.ndarray
    c_e: np.ndarray
    c_r: np.ndarray


def make_batch(records, rng: np.random.Generator | None, context: int, smoothing_eps: float) -> Batch:
    """One window per record (random start with ``rng``, else the first window)."""
    K = min(context, min(r.n for r in records))
    o, a, nx = [], [], []
    for r in records:
        s = int(rng.integers(0, r.n - K + 1)) if rng is not None else 0
        o.append(r.obs[s:s + K])
        a.append(r.actions[s:s + K])
        nx.append(r.obs[s + 1:s + K + 1])
    terrain = np.array([r.label.terrain for r in records])
    c_e = np.stack([one_hot(t, smoothing_eps) for t in terrain])
    c_r = np.stack([r.label.robot for r in records])
    return Batch(np.stack(o), np.stack(a), np.stack(nx), terrain, c_e, c_r)


def joint_loss(codec: TrajCodec, batch: Batch, rng: np.random.Generator | None, R=None) -> tuple[Tensor, dict]:
    cfg = codec.cfg
    mu, ls = codec.pooled(batch.obs_t, batch.acts, batch.next_obs)
    z = codec.sample_z(mu, ls, rng) if rng is not None else codec.to_sphere(mu)
    parts = {}
    total = Tensor(0.0)
    if cfg.lambda_recon > 0:
        L = recon_loss(codec, z, batch.obs_t, batch.acts, batch.next_obs)
        total = total + L * cfg.lambda_recon
        parts["recon"] = L.item()
    if cfg.lambda_con > 0:
        Lc, _ = contrastive_loss(z, batch.terrain, cfg.temperature)
        total = total + Lc * cfg.lambda_con
        parts["contrastive"] = Lc.item()
    if cfg.lambda_e > 0 or cfg.lambda_r > 0:
        Le, Lr = head_losses(codec, z, batch.c_e, batch.c_r, R)
        total = total + Le * cfg.lambda_e + Lr * cfg.lambda_r
        parts["terrain"] = Le.item()
        parts["robot"] = Lr.item()
    if cfg.beta_kl > 0:
        kl = prior_kl(mu, ls)
        total = total + kl * cfg.beta_kl
        parts["kl"] = kl.item()
    parts["total"] = total.item()
    return total, parts


class CodecTrainer:
    """Adam over the codec parameters with epoch-shuffled minibatches."""

    def __init__(self, codec: TrajCodec, R=None):
        self.codec = codec
        self.R = R
        self.opt = Adam(codec.params, lr=codec.cfg.lr)
        self.rng = np.random.default_rng([codec.cfg.seed, 11])
        self.epoch = 0

    def step(self, records) -> dict:
        codec = self.codec
        batch = make_batch(records, self.rng, codec.cfg.context, codec.cfg.smoothing_eps)
        codec.params.zero_grad()
        loss, parts = joint_loss(codec, batch, self.rng, self.R)
        if not math.isfinite(loss.item()):
            raise NumericalError("codec joint loss")
        backward(loss)
        self.opt.step(max_grad_norm=codec.cfg.max_grad_norm)
        codec.params.zero_grad()
        return parts

    def run_epoch(self, records) -> dict:
        order = self.rng.permutation(len(records))
        bs = self.codec.cfg.batch
        sums: dict[str, float] = {}
        nb = 0
        for b in range(0, len(order), bs):
            idx = order[b:b + bs]
            if len(idx) < 2:
                continue
            parts = self.step([records[i] for i in idx])
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
        self.epoch += 1
        rec = {k: v / max(nb, 1) for k, v in sums.items()}
        rec["epoch"] = self.epoch
        return rec


def train_encoder(records, cfg: EncoderConfig | None = None, R=None, codec: TrajCodec | None = None,
                  metrics_sink: Callable[[dict], None] | None = None) -> tuple[TrajCodec, list]:
    """Train (or continue training) a codec on labeled records; returns ``(codec, per-epoch records)``."""
    records = list(records)
    if not records:
        raise ConfigError("training set is empty")
    if any(r.label is None for r in records):
        raise ConfigError("every training record needs labels")
    codec = codec or TrajCodec(cfg)
    trainer = CodecTrainer(codec, R)
    history = []
    for _ in range(codec.cfg.epochs):
        rec = trainer.run_epoch(records)
        history.append(rec)
        log.info("codec epoch %d: %s", rec["epoch"], rec)
        if metrics_sink is not None:
            metrics_sink(rec)
    return codec, history


def config_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["decoder_hidden"] = list(cfg.decoder_hidden)
    d["head_hidden"] = list(cfg.head_hidden)
    return d
