import math

import numpy as np
import pytest
from scipy import stats

from planval import autodiff as ad
from planval import dynamics as dm
from planval.buffer import SegmentBuffer
from planval.envs import LinChain, Pendulum, oracle_rollout
from planval.errors import CapacityError, NumericError, StateError

from oracles import linear_fit


def _linchain_data(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-2, 2, (n, 1))
    a = rng.uniform(-1, 1, (n, 1))
    s2, r = LinChain().dynamics(s, a, rng.standard_normal((n, 1)))
    return dm.TransitionBatch(s, a, r, s2)


@pytest.fixture(scope="module")
def linchain_model():
    m = dm.EnsembleDynamicsModel(1, 1, np.random.default_rng(1), hidden=(32, 32))
    rep = dm.train_model(m, _linchain_data(2000, 0), np.random.default_rng(2), max_epochs=30)
    return m, rep


def _small_model(seed=0, obs=2, act=1, members=3, elites=2):
    return dm.EnsembleDynamicsModel(obs, act, np.random.default_rng(seed), members, elites,
                                    hidden=(8,), activation="swish")


class TestBatch:

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            dm.TransitionBatch(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros(3), np.zeros((3, 1)))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            dm.TransitionBatch(np.full((2, 1), np.nan), np.zeros((2, 1)), np.zeros(2), np.zeros((2, 1)))


class TestNLL:

    def test_unit_variance_exact_mean(self):
        tape = ad.Tape()
        v = dm.gaussian_nll(tape.const(np.zeros((1, 1))), tape.const(np.zeros((1, 1))), np.zeros((1, 1)))
        assert v.value[0] == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)
        assert v.value[0] == pytest.approx(0.91894, abs=1e-5)

    def test_duplicated_rows_same_mean(self):
        m = _small_model()
        rng = np.random.default_rng(3)
        b = dm.TransitionBatch(rng.normal(size=(10, 2)), rng.normal(size=(10, 1)),
                               rng.normal(size=10), rng.normal(size=(10, 2)))
        m.fit_normalizer(b)
        twice = b.take(np.r_[np.arange(10), np.arange(10)])
        assert dm.model_nll(m, b).value == pytest.approx(dm.model_nll(m, twice).value, rel=1e-14)

    def test_gradient(self):
        m = _small_model(4)
        rng = np.random.default_rng(5)
        b = dm.TransitionBatch(rng.normal(size=(12, 2)), rng.normal(size=(12, 1)),
                               rng.normal(size=12), rng.normal(size=(12, 2)))
        m.fit_normalizer(b)

        def fn(params):
            tape = ad.Tape()
            loss = dm.model_nll(m, b, tape)
            return loss.value, tape.backward(loss).aligned(params)
        assert ad.finite_diff_check(fn, m.params) < 1e-4

    def test_non_finite_loss(self):
        m = _small_model()
        m.params.assign("model.w0", np.full_like(m.params["model.w0"], 1e300))
        b = dm.TransitionBatch(np.ones((4, 2)), np.ones((4, 1)), np.ones(4), np.ones((4, 2)))
        with np.errstate(all="ignore"), pytest.raises(NumericError):
            dm.model_nll(m, b)

    def test_logvar_within_bounds(self):
        m = _small_model()
        for scale in (1e-3, 1.0, 1e3):
            m.params.assign("model.w1", np.random.default_rng(0).normal(size=m.params["model.w1"].shape) * scale)
            _, lv = m.forward(ad.Tape(record=False), np.random.default_rng(1).normal(size=(7, 3)))
            assert np.all(lv.value >= dm.LOGVAR_MIN - 1e-9)
            assert np.all(lv.value <= dm.LOGVAR_MAX + 1e-9)


class TestTraining:

    def test_capacity(self):
        m = _small_model(obs=1)
        with pytest.raises(CapacityError):
            dm.train_model(m, _linchain_data(100, 0), np.random.default_rng(0), batch_size=64)

    def test_recovers_linchain_coefficients(self, linchain_model):
        m, _ = linchain_model
        rng = np.random.default_rng(9)
        s, a = rng.uniform(-1, 1, (2000, 1)), rng.uniform(-1, 1, (2000, 1))
        pred, _ = dm.model_step(m, s, a, rng, "mean")
        ca, cb, _ = linear_fit(np.column_stack([s, a]), pred[:, 0])
        assert abs(ca - 0.9) < 0.02 and abs(cb - 0.5) < 0.02

    def test_heldout_rmse(self, linchain_model):
        m, _ = linchain_model
        d = _linchain_data(500, 77)
        pred, _ = dm.model_step(m, d.s, d.a, np.random.default_rng(0), "mean")
        # noise floor is 0.05
        assert np.sqrt(np.mean((pred - d.s_next) ** 2)) < 0.08

    def test_selected_not_worse_than_epoch_zero(self, linchain_model):
        _, rep = linchain_model
        assert np.all(rep.selected_nll <= rep.holdout_nll[0])
        assert len(rep.elites) == 3 and set(rep.elites) <= set(range(5))

    def test_determinism(self):
        def run():
            m = dm.EnsembleDynamicsModel(1, 1, np.random.default_rng(1), hidden=(8,))
            dm.train_model(m, _linchain_data(700, 3), np.random.default_rng(2), max_epochs=3)
            return m
        a, b = run(), run()
        assert np.array_equal(a.elites, b.elites)
        for k in a.params.names():
            assert np.array_equal(a.params[k], b.params[k])

    def test_elite_selection_permutation_invariant(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=7)
        elites = dm.select_elites(scores, 3)
        perm = rng.permutation(7)
        back = np.sort(perm[dm.select_elites(scores[perm], 3)])
        np.testing.assert_array_equal(back, elites)

    def test_normalizer_round_trip(self, linchain_model):
        m, _ = linchain_model
        x = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_allclose(m.denormalize_in(m.normalize_in(x)), x, atol=1e-12)
        y = np.random.default_rng(1).normal(size=(20, 2))
        np.testing.assert_allclose(m.denormalize_out(m.normalize_out(y)), y, atol=1e-12)


class TestStep:

    def test_untrained(self):
        with pytest.raises(StateError):
            dm.model_step(_small_model(), np.zeros((1, 2)), np.zeros((1, 1)), np.random.default_rng(0))

    def test_zero_noise_sample_equals_mean(self, linchain_model):
        m, _ = linchain_model
        s, a = np.linspace(-1, 1, 9)[:, None], np.zeros((9, 1))
        members, _ = m.draw_noise(np.random.default_rng(0), 9)
        tape = ad.Tape(record=False)
        x1 = m.predict(tape, s, a, members, np.zeros((9, 2)))
        x2, _ = dm.model_step(m, s, a, np.random.default_rng(0), "mean")
        np.testing.assert_array_equal(x1[0].value, x2)

    def test_same_stream_same_output(self, linchain_model):
        m, _ = linchain_model
        s = np.random.default_rng(0).normal(size=(5, 1))
        a = np.zeros((5, 1))
        r1 = dm.model_step(m, s, a, np.random.default_rng(4))
        r2 = dm.model_step(m, s, a, np.random.default_rng(4))
        assert np.array_equal(r1[0], r2[0]) and np.array_equal(r1[1], r2[1])

    def test_members_drawn_from_elites(self, linchain_model):
        m, _ = linchain_model
        members, _ = m.draw_noise(np.random.default_rng(0), 1000)
        assert set(members) == set(m.elites)

    def test_fast_path_matches_tape_path(self):
        m = _small_model(2)
        m.trained = True
        rng = np.random.default_rng(0)
        s, a = rng.normal(size=(11, 2)), rng.normal(size=(11, 1))
        members, noise = m.draw_noise(rng, 11)
        fast = m.predict(ad.Tape(record=False), s, a, members, noise)
        tape = ad.Tape()
        slow = m.predict(tape, tape.leaf(s, "s"), a, members, noise)
        assert np.array_equal(fast[0].value, slow[0].value)
        assert np.array_equal(fast[1].value, slow[1].value)

    def test_sampled_step_gradient(self):
        m = _small_model(6)
        m.trained = True
        rng = np.random.default_rng(1)
        s, a = rng.normal(size=(6, 2)), rng.normal(size=(6, 1))
        members, noise = m.draw_noise(rng, 6)

        def fn(params):
            tape = ad.Tape()
            s2, r = m.predict(tape, s, a, members, noise, trainable=True)
            out = ad.reduce_sum(s2 * s2) + ad.reduce_sum(r)
            return out.value, tape.backward(out).aligned(params)
        assert ad.finite_diff_check(fn, m.params) < 1e-4


class TestRollout:

    def test_length_one(self, linchain_model):
        m, _ = linchain_model
        seg = dm.branched_rollout(m, lambda o, r: np.zeros((len(o), 1)), np.zeros((4, 1)), 6, 1,
                                  np.random.default_rng(0))
        assert seg.obs.shape == (6, 1, 1) and seg.rew.shape == (6, 1)
        assert not seg.done.any()

    def test_true_dynamics_stub_matches_oracle(self):
        env = LinChain()
        stub = dm.TrueDynamicsModel(env)
        pool = np.random.default_rng(0).normal(size=(10, 1))
        acts = np.random.default_rng(1).uniform(-1, 1, (3, 1))
        calls = iter(range(100))

        def policy(o, rng):
            return np.tile(acts[next(calls) % 3], (len(o), 1))
        rng = np.random.default_rng(2)
        seg = dm.branched_rollout(stub, policy, pool, 1, 3, rng, mode="mean")
        obs, rews = oracle_rollout(env, seg.obs[0, 0], acts)
        np.testing.assert_allclose(seg.next_obs[0, :, 0], np.concatenate(obs[1:]), atol=0)
        np.testing.assert_allclose(seg.rew[0], rews, atol=0)

    def test_start_states_uniform_over_buffer(self):
        buf = SegmentBuffer(50, 1, 1)
        obs = np.arange(50, dtype=float)[:, None]
        buf.add(obs, np.zeros((50, 1)), np.zeros(50), obs, False, 0, np.arange(50))
        stub = dm.TrueDynamicsModel(LinChain())
        seg = dm.branched_rollout(stub, lambda o, r: np.zeros((len(o), 1)), buf, 100_000, 1,
                                  np.random.default_rng(0), "mean")
        counts = np.bincount(seg.obs[:, 0, 0].astype(int), minlength=50)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_pendulum_stub_plan_matches_env(self):
        env = Pendulum()
        stub = dm.TrueDynamicsModel(env)
        s = env.observe(np.array([[0.4, -1.0]]))
        s2, r = dm.model_step(stub, s, np.array([[0.3]]), np.random.default_rng(0))
        obs, rews = oracle_rollout(env, s[0], np.array([[0.3]]))
        np.testing.assert_array_equal(s2[0], obs[1])
        assert r[0] == rews[0]

    def test_bad_length(self):
        with pytest.raises(ValueError):
            dm.branched_rollout(dm.TrueDynamicsModel(LinChain()), None, np.zeros((1, 1)), 1, 0,
                                np.random.default_rng(0))

    def test_noisy_model_shifts_state_only(self):
        env = LinChain()
        base = dm.TrueDynamicsModel(env)
        noisy = dm.NoisyModel(base, 0.05)
        rng = np.random.default_rng(0)
        s, a = rng.normal(size=(2000, 1)), np.zeros((2000, 1))
        members, noise = noisy.draw_noise(rng, 2000, "mean")
        tape = ad.Tape(record=False)
        s2, r = noisy.predict(tape, s, a, members, noise)
        t2, tr = base.predict(tape, s, a, members, noise[:, :1])
        np.testing.assert_array_equal(r.value, tr.value)
        assert np.std(s2.value - t2.value) == pytest.approx(0.05, rel=0.1)


def test_checkpoint_arrays_round_trip(linchain_model):
    m, _ = linchain_model
    arrs = m.state_arrays()
    m2 = dm.EnsembleDynamicsModel(1, 1, np.random.default_rng(99), hidden=(32, 32))
    m2.load_arrays(arrs)
    s = np.random.default_rng(0).normal(size=(5, 1))
    a = np.zeros((5, 1))
    assert np.array_equal(dm.model_step(m, s, a, np.random.default_rng(1))[0],
                          dm.model_step(m2, s, a, np.random.default_rng(1))[0])
    np.testing.assert_array_equal(m2.elites, m.elites)
