import math

import numpy as np
import pytest

from loopsr.errors import ConfigError
from loopsr.numgrad import Tensor, grad_check
from loopsr.terrasim import FULL_RANGE, N_TERRAINS, PARAM_HI, PARAM_LO, EnvParams, one_hot, rollout_batch
from loopsr.trajcodec import (
    OBS_SCALE,
    EncoderConfig,
    TrajCodec,
    contrastive_loss,
    head_losses,
    joint_loss,
    make_batch,
    prior_kl,
    recon_loss,
    tokenize,
    train_encoder,
)

from conftest import random_policy


def tiny(**kw):
    base = dict(d_model=16, heads=2, layers=1, context=6, latent_dim=32, seed=3)
    base.update(kw)
    return TrajCodec(EncoderConfig(**base))


def zero_params(codec, prefix):
    for name, t in codec.params.items():
        if name.startswith(prefix):
            t.data[...] = 0.0


def records(n, T=12, seed=0):
    return rollout_batch(EnvParams.pretraining(), random_policy(seed), [[seed, i] for i in range(n)], T=T).records


def test_token_counts():
    codec = tiny(max_timesteps=200)
    r1 = records(1, T=1)[0]
    assert tokenize(codec, r1.trajectory).shape == (3, 16)
    r200 = records(1, T=200)[0]
    assert tokenize(codec, r200.trajectory).shape == (600, 16)


def test_tokens_match_hand_embedding(small_records):
    codec = tiny()
    tr = small_records[0].trajectory
    tok = tokenize(codec, tr).data
    p = {k: v.data for k, v in codec.params.items()}
    pos = p["embed.pos"]
    for t in (0, 5, 11):
        o, a, nx = tr.obs[t], tr.actions[t], tr.obs[t + 1]
        np.testing.assert_allclose(tok[3 * t], (o * OBS_SCALE) @ p["embed.obs.W"] + p["embed.obs.b"] + pos[t],
                                   atol=1e-13)
        np.testing.assert_allclose(tok[3 * t + 1], a @ p["embed.act.W"] + p["embed.act.b"] + pos[t], atol=1e-13)
        np.testing.assert_allclose(tok[3 * t + 2], (nx * OBS_SCALE) @ p["embed.next.W"] + p["embed.next.b"] + pos[t],
                                   atol=1e-13)


def test_token_order_matters(small_records):
    codec = tiny()
    r = small_records[1]
    perm = np.random.default_rng(0).permutation(r.n)
    obs = r.obs.copy()
    acts = r.actions[perm]
    a = codec.tokens(obs[None, :-1], r.actions[None], obs[None, 1:]).data
    b = codec.tokens(obs[None, :-1][:, perm], acts[None], obs[None, 1:][:, perm]).data
    assert not np.allclose(a, b)


def test_empty_and_overlong_trajectories_rejected():
    codec = tiny(max_timesteps=8)
    r = records(1, T=1)[0]
    with pytest.raises(ConfigError):
        tokenize(codec, type(r.trajectory)(r.obs[:1], r.actions[:0]))
    long = records(1, T=9)[0]
    with pytest.raises(ConfigError):
        tokenize(codec, long.trajectory)


def test_encode_unit_norm_and_deterministic(small_records):
    codec = tiny()
    a = codec.encode_many([r.trajectory for r in small_records[:6]])
    b = codec.encode_many([r.trajectory for r in small_records[:6]])
    for u, v in zip(a, b):
        assert np.linalg.norm(u.z) == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(u.z, v.z)
    sampled = codec.encode(small_records[0].trajectory, rng=np.random.default_rng(1)).z
    assert np.linalg.norm(sampled) == pytest.approx(1.0, abs=1e-12)
    assert not np.array_equal(sampled, a[0].z)


def test_encoder_is_causal(small_records):
    codec = tiny(context=12)
    r = small_records[2]
    o, a = r.obs.copy(), r.actions.copy()
    mu1, _ = codec.timestep_latents(o[None, :-1], a[None], o[None, 1:])
    o2, a2 = o.copy(), a.copy()
    o2[8:] += 3.0
    a2[7:] = -a2[7:]
    mu2, _ = codec.timestep_latents(o2[None, :-1], a2[None], o2[None, 1:])
    np.testing.assert_array_equal(mu1.data[0, :7], mu2.data[0, :7])
    assert not np.allclose(mu1.data[0, 7:], mu2.data[0, 7:])


def test_prefix_encoding_equals_truncated_trajectory(small_records):
    codec = tiny()
    r = small_records[3]
    full = codec.encode(r.trajectory, upto=5)
    cut = codec.encode(type(r.trajectory)(r.obs[:6], r.actions[:5]))
    np.testing.assert_allclose(full.z, cut.z, atol=1e-14)


def test_recon_loss_with_zero_decoder(small_records):
    codec = tiny()
    zero_params(codec, "decoder")
    b = make_batch(small_records[:4], None, 6, 0.05)
    z = Tensor(np.random.default_rng(0).normal(size=(4, 32)))
    want = float(np.sum(b.next_obs ** 2)) / 4
    assert recon_loss(codec, z, b.obs_t, b.acts, b.next_obs).item() == pytest.approx(want, rel=1e-14)


def _infonce_oracle(Z, labels, temp):
    total, anchors = 0.0, 0
    for i in range(len(Z)):
        pos = [j for j in range(len(Z)) if j != i and labels[j] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(Z[i] @ Z[k] / temp) for k in range(len(Z)) if k != i)
        total += -sum(math.log(math.exp(Z[i] @ Z[j] / temp) / denom) for j in pos) / len(pos)
        anchors += 1
    return total / anchors


@pytest.mark.parametrize("temp", [1.0, 0.3])
def test_contrastive_matches_loop_oracle(temp):
    rng = np.random.default_rng(4)
    Z = rng.normal(size=(7, 32))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    labels = [0, 1, 0, 2, 1, 0, 4]
    loss, flag = contrastive_loss(Tensor(Z), labels, temp)
    assert not flag
    assert loss.item() == pytest.approx(_infonce_oracle(Z, labels, temp), rel=1e-12)


def test_contrastive_worked_example():
    # two positives facing each other and one orthogonal negative: -log(e / (e + 1)) per anchor
    Z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    loss, _ = contrastive_loss(Tensor(Z), [1, 1, 2])
    assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), rel=1e-14)


def test_contrastive_two_point_cases():
    z = np.array([[0.6, 0.8], [0.6, 0.8]])
    loss, flag = contrastive_loss(Tensor(z), [3, 3])
    assert not flag and loss.item() == pytest.approx(0.0, abs=1e-15)
    loss, flag = contrastive_loss(Tensor(z), [3, 1])
    assert flag and loss.item() == 0.0


def test_contrastive_decreases_with_positive_similarity():
    def loss_at(angle):
        Z = np.array([[1.0, 0.0, 0.0], [np.cos(angle), np.sin(angle), 0.0], [0.0, 0.0, 1.0]])
        return contrastive_loss(Tensor(Z), [0, 0, 1])[0].item()

    values = [loss_at(a) for a in (1.2, 0.8, 0.4, 0.0)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_contrastive_without_positives():
    Z = Tensor(np.eye(3))
    loss, flag = contrastive_loss(Z, [0, 1, 2])
    assert flag and loss.item() == 0.0
    with pytest.raises(ConfigError):
        contrastive_loss(Tensor(np.eye(1)), [0])


@pytest.mark.parametrize("direction", ["model_target", "target_model"])
def test_head_losses_with_uniform_head(direction):
    codec = tiny()
    zero_params(codec, "head_e")
    zero_params(codec, "head_r")
    c_e = np.stack([one_hot(2, 0.05), one_hot(4, 0.05)])
    c_r = np.array([[1.0, 0.5, 0.9, 0.1], [0.7, 1.0, 1.3, 0.5]])
    z = Tensor(np.random.default_rng(0).normal(size=(2, 32)))
    L_e, L_r = head_losses(codec, z, c_e, c_r, kl_direction=direction)
    u = 1.0 / N_TERRAINS
    if direction == "model_target":
        want = np.mean([sum(u * math.log(u / c) for c in row) for row in c_e])
    else:
        want = np.mean([sum(c * math.log(c / u) for c in row) for row in c_e])
    assert L_e.item() == pytest.approx(want, rel=1e-12)
    mid = (PARAM_LO + PARAM_HI) / 2
    assert L_r.item() == pytest.approx(float(np.mean(np.abs(mid - c_r) / FULL_RANGE)), rel=1e-12)


def test_head_losses_reject_unsmoothed_targets():
    codec = tiny()
    with pytest.raises(ConfigError):
        head_losses(codec, Tensor(np.ones((1, 32))), one_hot(1), np.ones(4))


def test_prior_kl_against_quadrature():
    mu, ls = np.array([[0.3, -1.2]]), np.array([[-0.4, 0.2]])
    got = prior_kl(Tensor(mu), Tensor(ls)).item()
    x = np.linspace(-15, 15, 400001)
    want = 0.0
    for m, s in zip(mu[0], np.exp(ls[0])):
        logq = -0.5 * ((x - m) / s) ** 2 - np.log(s * math.sqrt(2 * math.pi))
        logp = -0.5 * x ** 2 - 0.5 * math.log(2 * math.pi)
        want += np.trapezoid(np.exp(logq) * (logq - logp), x)
    assert got == pytest.approx(want, rel=1e-8)
    assert prior_kl(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4)))).item() == 0.0


def test_joint_loss_gradient(small_records):
    codec = tiny(d_model=8, heads=2, decoder_hidden=(8,), head_hidden=(8,), context=4, beta_kl=0.1)
    recs = [r for r in small_records if r.label.terrain == small_records[0].label.terrain][:2]
    recs = recs if len(recs) == 2 else small_records[:2]
    batch = make_batch(recs, None, 4, 0.05)
    err = grad_check(lambda p: joint_loss(codec, batch, None)[0], codec.params, max_coords=6, seed=1)
    assert err < 1e-5


def test_pure_autoencoder_objective_is_reconstruction(small_records):
    codec = tiny(lambda_con=0.0, lambda_e=0.0, lambda_r=0.0, beta_kl=0.0)
    batch = make_batch(small_records[:5], None, 6, 0.05)
    total, parts = joint_loss(codec, batch, None)
    mu, _ = codec.pooled(batch.obs_t, batch.acts, batch.next_obs)
    want = recon_loss(codec, codec.to_sphere(mu), batch.obs_t, batch.acts, batch.next_obs).item()
    assert total.item() == want
    assert set(parts) == {"recon", "total"}


def test_training_reduces_loss():
    recs = records(200, T=12, seed=9)
    cfg = EncoderConfig(d_model=16, heads=2, layers=1, context=12, batch=32, epochs=5, lr=1e-3, seed=2)
    _, hist = train_encoder(recs, cfg)
    totals = np.array([h["total"] for h in hist])
    assert len(totals) == 5
    smooth = np.convolve(totals, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) <= 0)


def test_training_rejects_unlabeled(small_records):
    r = small_records[0]
    with pytest.raises(ConfigError):
        train_encoder([type(r)(r.obs, r.actions, None)], EncoderConfig(epochs=1))
    with pytest.raises(ConfigError):
        train_encoder([], EncoderConfig(epochs=1))


def test_save_load_round_trip(tmp_path, small_records):
    codec = tiny()
    codec.save(tmp_path / "c.lsrw")
    back = TrajCodec.load(tmp_path / "c.lsrw", codec.cfg)
    tr = small_records[0].trajectory
    assert np.array_equal(codec.encode(tr).z, back.encode(tr).z)
    assert np.array_equal(codec.predict_params(codec.encode(tr).z)[1], back.predict_params(back.encode(tr).z)[1])
