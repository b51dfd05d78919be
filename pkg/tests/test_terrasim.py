import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopsr import _kernels_py, kernels
from loopsr.errors import ConfigError, FormatError, TruncationError, UsageError, VersionError
from loopsr.terrasim import (
    DIFFICULTIES,
    FULL_RANGE,
    PARAM_HI,
    PARAM_LO,
    EnvParams,
    RobotParams,
    TerrainType,
    VecEnv,
    dumps_dataset,
    load_dataset,
    loads_dataset,
    make_env,
    one_hot,
    realize,
    rollout,
    rollout_batch,
    sampling_interval,
    save_dataset,
    slope_at,
)

MASK = (1 << 64) - 1


def splitmix_eta(seed: int, k: int) -> float:
    """Pure-integer reference for the rough-terrain hash."""
    z = (seed + (k & MASK) * 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    z ^= z >> 31
    return (z >> 11) * 2.0**-53 * 2.0 - 1.0


def reference_step(x, v, u, terrain, d, robot, field_seed):
    """Scalar transcription of the dynamics used as an independent oracle."""
    m, mu, km, er = robot
    if terrain == 1:
        s = 0.4 * d
    elif terrain == 2:
        s = -(0.4 * d)
    elif terrain == 4:
        s = 0.3 * d * splitmix_eta(field_seed, math.floor(x / 0.2))
    else:
        s = 0.0
    a = (4.0 * km * u - mu * v - m * 9.81 * s) / m
    v2 = v + 0.02 * a
    x2 = x + 0.02 * v2
    contact = terrain == 3 and math.floor(x2 / 0.3) > math.floor(x / 0.3)
    if contact:
        v2 *= 1.0 - 0.5 * d * (1.0 - er)
    return x2, v2, a, contact


@pytest.mark.parametrize("terrain", list(TerrainType))
def test_dynamics_match_scalar_oracle(terrain):
    params = EnvParams.fixed(int(terrain), 0.6, RobotParams(1.1, 0.4, 0.9, 0.2))
    env = make_env(params, seed=3)
    real = env.realization
    rng = np.random.default_rng(0)
    x = v = 0.0
    for _ in range(200):
        u = float(rng.uniform(-0.2, 1.0))
        x, v, a, contact = reference_step(x, v, u, int(terrain), 0.6, real.robot, real.field_seed)
        state, obs, reward, done, priv = env.step(u)
        assert state.x == x and state.v == v and state.a_prev == a
        assert obs[3] == float(contact)
        assert reward == pytest.approx(math.exp(-((v - 1.0) ** 2) / 0.25) - 0.01 * u * u, rel=1e-15)
    assert done


def test_flat_zero_action_reward():
    env = make_env(EnvParams.fixed(0, 0.3, RobotParams.midpoint()), seed=0)
    state, _, reward, _, _ = env.step(0.0)
    assert state.x == 0.0 and state.v == 0.0
    assert reward == pytest.approx(math.exp(-4.0), abs=1e-15)
    assert reward == pytest.approx(0.01832, abs=1e-5)


def test_unit_velocity_zero_action_gives_unit_reward():
    env = VecEnv(EnvParams.fixed(0, 0.3, RobotParams(1.0, 0.2, 1.0, 0.0)), 1)
    env.reset([0])
    env._fric[:] = 0.0  # frictionless override for the boundary case
    env.v[:] = 1.0
    _, r, _, _ = env.step(np.zeros(1))
    assert r[0] == 1.0


def test_stair_impulse_factor():
    # e_r = 0.5, d = 0.6: factor 1 - 0.5 * 0.6 * 0.5 = 0.85
    x = np.array([0.299])
    v = np.array([1.0])
    args = (np.zeros(1), np.array([3], dtype=np.int8), np.array([0.6]), np.ones(1), np.zeros(1), np.ones(1),
            np.array([0.5]), np.zeros(1, dtype=np.uint64))
    _, contact, _ = kernels.physics_step(x, v, *args)
    assert contact[0] == 1
    assert v[0] == pytest.approx(0.85, abs=1e-15)


def test_slope_values():
    assert slope_at(TerrainType.FLAT, 0.9, 1.7) == 0.0
    assert slope_at(TerrainType.SLOPE_UP, 0.6, 3.0) == pytest.approx(0.24, abs=1e-15)
    assert slope_at(TerrainType.SLOPE_DOWN, 0.3, 0.0) == pytest.approx(-0.12, abs=1e-15)
    assert slope_at(TerrainType.STAIRS, 0.9, 0.31) == 0.0
    a = slope_at(TerrainType.ROUGH, 0.9, 1.23, field_seed=42)
    assert a == slope_at(TerrainType.ROUGH, 0.9, 1.23, field_seed=42)
    assert a == pytest.approx(0.27 * splitmix_eta(42, 6), abs=1e-15)


@given(st.integers(0, 2**63 - 1), st.integers(-10**6, 10**6))
@settings(max_examples=200, deadline=None)
def test_rough_hash_matches_integer_reference(seed, k):
    eta = float(_kernels_py.rough_eta(np.uint64(seed), k))
    assert eta == splitmix_eta(seed, k)
    assert -1.0 <= eta < 1.0


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
@pytest.mark.parametrize("terrain", list(TerrainType))
def test_compiled_and_fallback_kernels_bit_identical(terrain):
    from loopsr import _kernels

    rng = np.random.default_rng(int(terrain))
    n = 257
    args = dict(u=rng.uniform(-1, 1, n), terrain=np.full(n, int(terrain), dtype=np.int8),
                difficulty=rng.choice(DIFFICULTIES, n), mass=rng.uniform(0.7, 1.3, n),
                friction=rng.uniform(0.2, 1, n), motor=rng.uniform(0.7, 1.3, n),
                restitution=rng.uniform(0, 0.5, n), field_seed=rng.integers(0, 2**63 - 1, n, dtype=np.uint64))
    x0, v0 = rng.uniform(-2, 5, n), rng.uniform(-1, 2, n)
    xa, va, xb, vb = x0.copy(), v0.copy(), x0.copy(), v0.copy()
    for _ in range(50):
        ra = _kernels.physics_step(xa, va, **args)
        rb = _kernels_py.physics_step(xb, vb, **args)
        for p, q in zip(ra, rb):
            assert np.asarray(p).tobytes() == np.asarray(q).astype(np.asarray(p).dtype).tobytes()
    assert xa.tobytes() == xb.tobytes() and va.tobytes() == vb.tobytes()
    assert np.array_equal(_kernels.slope_batch(args["terrain"], args["difficulty"], x0, args["field_seed"]),
                          _kernels_py.slope_batch(args["terrain"], args["difficulty"], x0, args["field_seed"]))


def test_realization_rules():
    p = EnvParams(one_hot(TerrainType.STAIRS), RobotParams(1.0, 0.5, 1.0, 0.2), np.zeros(4))
    for s in range(20):
        r = realize(p, s)
        assert r.terrain == TerrainType.STAIRS
        np.testing.assert_array_equal(r.robot, [1.0, 0.5, 1.0, 0.2])
        assert r.difficulty in DIFFICULTIES
    a, b = realize(EnvParams.pretraining(), 9), realize(EnvParams.pretraining(), 9)
    assert a.terrain == b.terrain and np.array_equal(a.robot, b.robot) and a.field_seed == b.field_seed


def test_realized_robot_within_truncated_interval():
    c = RobotParams(1.3, 0.2, 1.0, 0.4)
    lo, hi = sampling_interval(c.as_array(), FULL_RANGE / 2)
    np.testing.assert_allclose(lo, [1.15, 0.2, 0.85, 0.275])
    np.testing.assert_allclose(hi, [1.3, 0.4, 1.15, 0.5])
    for s in range(50):
        r = realize(EnvParams(one_hot(0), c, FULL_RANGE / 2), s).robot
        assert np.all(r >= lo) and np.all(r <= hi)


def test_invalid_params_rejected():
    with pytest.raises(ConfigError):
        EnvParams(np.array([0.5, 0.5, 0.1, 0, 0]), RobotParams.midpoint()).validate()
    with pytest.raises(ConfigError):
        EnvParams(one_hot(0), RobotParams(2.0, 0.5, 1.0, 0.0)).validate()
    with pytest.raises(ConfigError):
        EnvParams(one_hot(0), RobotParams.midpoint(), -np.ones(4)).validate()
    with pytest.raises(ConfigError):
        EnvParams(one_hot(0), RobotParams.midpoint(), difficulty=0.5).validate()


def test_step_after_done_and_before_reset():
    env = make_env(EnvParams.fixed(0, 0.3, RobotParams.midpoint()), 0)
    for _ in range(200):
        env.step(0.1)
    with pytest.raises(UsageError):
        env.step(0.1)
    with pytest.raises(UsageError):
        VecEnv(EnvParams.pretraining(), 2).step(np.zeros(2))


def test_observation_hides_privileged_state():
    env = make_env(EnvParams.fixed(4, 0.9, RobotParams.midpoint()), 1)
    _, obs, _, _, priv = env.step(0.5)
    assert obs.shape == (4,) and priv.shape == (15,)
    np.testing.assert_array_equal(priv[:4], obs)
    assert priv[4:9].sum() == 1.0 and priv[4 + 4] == 1.0
    assert obs[0] != env.state.v  # noisy velocity


def test_contact_flag_only_on_stairs():
    for t in TerrainType:
        rec = rollout(make_env(EnvParams.fixed(int(t), 0.9, RobotParams.midpoint()), 2), lambda o: 1.0)[0]
        flags = rec.obs[:, 3]
        assert (flags.max() == 1.0) == (t == TerrainType.STAIRS)


def test_energy_sanity_flat_coasting():
    env = VecEnv(EnvParams.fixed(0, 0.3, RobotParams(1.0, 0.6, 1.0, 0.0)), 1)
    env.reset([0])
    env.v[:] = 1.5
    prev = 1.5
    for _ in range(100):
        env.step(np.zeros(1))
        assert abs(env.v[0]) <= prev
        prev = abs(env.v[0])


def test_parameter_monotonicity_over_seeds():
    def final_x(robot, seed):
        env = VecEnv(EnvParams.fixed(0, 0.3, robot), 1)
        env.reset([seed])
        for _ in range(200):
            env.step(np.ones(1))
        return env.x[0]

    for seed in range(20):
        xs_k = [final_x(RobotParams(1.0, 0.5, k, 0.1), seed) for k in (0.7, 1.0, 1.3)]
        xs_mu = [final_x(RobotParams(1.0, mu, 1.0, 0.1), seed) for mu in (0.2, 0.6, 1.0)]
        assert xs_k == sorted(xs_k)
        assert xs_mu == sorted(xs_mu, reverse=True)


def test_terrain_signatures_are_separable():
    # mean |dv| under a fixed open-loop command differs across terrain families
    sig = {}
    for t in TerrainType:
        res = rollout_batch(EnvParams.fixed(int(t), 0.9, RobotParams.midpoint()), lambda o: np.full(len(o), 0.6),
                            [[t, i] for i in range(16)])
        v = np.stack([r.obs[:, 0] for r in res.records])
        sig[t] = (np.abs(np.diff(v, axis=1)).mean(), v[:, -50:].mean())
    keys = list(sig)
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            assert np.max(np.abs(np.subtract(sig[keys[i]], sig[keys[j]]))) > 1e-3


def test_rollout_alignment_and_reward_free_view():
    rec, rewards, priv = rollout(make_env(EnvParams.pretraining(), 5), lambda o: 0.3)
    assert rec.n == 200 and rewards.shape == (200,) and priv.shape == (200, 15)
    o_t, a_t, o_next = rec.triples()
    np.testing.assert_array_equal(o_next[:-1], o_t[1:])
    view = rec.trajectory
    assert set(view._fields) == {"obs", "actions"}
    assert rec.label.checkpoint_id == -1


def test_vector_and_scalar_rollouts_agree():
    policy = lambda o: np.tanh(1.0 - np.atleast_2d(o)[:, 0])  # noqa: E731
    batch = rollout_batch(EnvParams.pretraining(), policy, [11, 12]).records
    single = rollout(make_env(EnvParams.pretraining(), 12), lambda o: float(policy(o)[0]))[0]
    assert batch[1].obs.tobytes() == single.obs.tobytes()
    assert batch[1].actions.tobytes() == single.actions.tobytes()


def test_dataset_round_trip_bit_exact(tmp_path, small_records):
    recs = list(small_records[:5])
    recs.append(type(recs[0])(recs[0].obs, recs[0].actions, None))
    path = tmp_path / "d.lsrt"
    save_dataset(recs, path)
    back = load_dataset(path)
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert a.obs.tobytes() == b.obs.tobytes() and a.actions.tobytes() == b.actions.tobytes()
        if a.label is None:
            assert b.label is None
        else:
            assert (a.label.terrain, a.label.difficulty, a.label.checkpoint_id) == \
                (b.label.terrain, b.label.difficulty, b.label.checkpoint_id)
            assert a.label.robot.tobytes() == b.label.robot.tobytes()
    assert dumps_dataset(back) == dumps_dataset(recs)


def test_dataset_format_errors(small_records):
    buf = dumps_dataset(small_records[:2])
    with pytest.raises(FormatError):
        loads_dataset(b"LSRW" + buf[4:])
    with pytest.raises(VersionError):
        loads_dataset(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(TruncationError):
        loads_dataset(buf[:-1])


def test_parameter_range_constants():
    np.testing.assert_array_equal(PARAM_LO, [0.7, 0.2, 0.7, 0.0])
    np.testing.assert_array_equal(PARAM_HI, [1.3, 1.0, 1.3, 0.5])
