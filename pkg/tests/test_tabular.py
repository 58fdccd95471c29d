import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planval import tabular as tb
from planval.envs import m2_mdp, random_mdp
from planval.errors import CapacityError, ConvergenceError, ShapeError

from oracles import (conditioned_plan_values, plan_probabilities, policy_state_values,
                     soft_value_iteration, value_iteration)


def _pi1(p):
    return tb.TabularPolicy(np.array([[1 - p, p], [1 - p, p]]))


OPTIMAL_M2 = tb.TabularPolicy.deterministic([1, 0], 2)


class TestTypes:

    def test_rejects_bad_rows(self):
        P = np.full((2, 1, 2), 0.6)
        with pytest.raises(ValueError):
            tb.TabularMDP(P, np.zeros((2, 1)), 0.9)

    def test_rejects_gamma_outside_unit_interval(self):
        m = m2_mdp()
        for g in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError):
                tb.TabularMDP(m.transition, m.reward, g)

    def test_policy_rows_must_be_distributions(self):
        with pytest.raises(ValueError):
            tb.TabularPolicy(np.array([[0.5, 0.6]]))

    def test_plan_index_is_lexicographic(self):
        plans = tb.plan_list(3, 2)
        assert plans[0] == (0, 0) and plans[-1] == (2, 2)
        for j, p in enumerate(plans):
            assert tb.plan_index(p, 3) == j

    def test_table_shape(self):
        q = tb.PlanValueTable.zeros(4, 3, 2)
        assert q.values.shape == (4, 9)


class TestPlanDistribution:

    def test_deterministic_policy_single_plan(self):
        # single support needs deterministic dynamics as well
        nxt = np.random.default_rng(1).integers(0, 4, (4, 3))
        mdp = tb.TabularMDP(np.eye(4)[nxt], np.zeros((4, 3)), 0.9)
        pol = tb.TabularPolicy.deterministic([0, 2, 1, 1], 3)
        d = tb.plan_distribution(mdp, pol, 2, 3)
        assert len(d.support) == 1 and d.support[0][1] == pytest.approx(1.0, abs=1e-12)

    def test_uniform_deterministic_dynamics(self):
        d = tb.plan_distribution(m2_mdp(), tb.TabularPolicy.uniform(2, 2), 0, 2)
        assert len(d.support) == 4
        for _, p in d.support:
            assert p == pytest.approx(0.25, abs=1e-15)

    def test_m2_example(self):
        d = tb.plan_distribution(m2_mdp(), _pi1(0.3), 0, 2).as_dict()
        assert d[(1, 1)] == pytest.approx(0.09, abs=1e-15)
        assert d[(1, 0)] == pytest.approx(0.21, abs=1e-15)
        assert d[(0, 1)] == pytest.approx(0.21, abs=1e-15)
        assert d[(0, 0)] == pytest.approx(0.49, abs=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
    def test_matches_path_enumeration(self, seed, k):
        mdp = random_mdp(seed, 3, 2)
        probs = np.random.default_rng(seed).dirichlet(np.ones(2), size=3)
        pol = tb.TabularPolicy(probs)
        d = tb.plan_distribution(mdp, pol, seed % 3, k).as_dict()
        ref = plan_probabilities(mdp.transition, probs, seed % 3, k)
        assert set(d) == set(ref)
        for plan, p in ref.items():
            assert d[plan] == pytest.approx(p, abs=1e-13)
        assert sum(d.values()) == pytest.approx(1.0, abs=1e-10)

    def test_capacity_guard(self):
        mdp = random_mdp(0, 2, 8)
        with pytest.raises(CapacityError):
            tb.plan_distribution(mdp, tb.TabularPolicy.uniform(2, 8), 0, 7)


class TestBackup:

    def test_zero_bootstrap_k1_is_reward(self):
        mdp = m2_mdp()
        q = tb.bellman_backup(mdp, tb.PlanValueTable.zeros(2, 2, 1), _pi1(0.4))
        np.testing.assert_array_equal(q.values, mdp.reward)

    def test_two_step_reward(self):
        mdp = m2_mdp()
        q = tb.bellman_backup(mdp, tb.PlanValueTable.zeros(2, 2, 2), OPTIMAL_M2)
        assert q[0, (1, 0)] == pytest.approx(0.9, abs=1e-15)

    def test_soft_with_deterministic_policy_equals_vanilla(self):
        mdp = random_mdp(4, 3, 2)
        pol = tb.TabularPolicy.deterministic([1, 0, 1], 2)
        q0 = tb.PlanValueTable(2, np.random.default_rng(0).normal(size=(3, 4)))
        a = tb.bellman_backup(mdp, q0, pol)
        b = tb.bellman_backup(mdp, q0, pol, soft=True, alpha=0.7)
        np.testing.assert_allclose(a.values, b.values, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tb.bellman_backup(m2_mdp(), tb.PlanValueTable.zeros(3, 2, 1), _pi1(0.5))


class TestEvaluation:

    def test_m2_k1_optimal(self):
        q = tb.evaluate_policy(m2_mdp(), OPTIMAL_M2, 1, tol=1e-12)
        assert q[1, (0,)] == pytest.approx(10.0, abs=1e-9)
        assert q[0, (1,)] == pytest.approx(9.0, abs=1e-9)

    def test_m2_k2_optimal(self):
        q = tb.evaluate_policy(m2_mdp(), OPTIMAL_M2, 2, tol=1e-12)
        assert q[0, (1, 0)] == pytest.approx(9.0, abs=1e-9)

    def test_zero_rewards(self):
        mdp = random_mdp(2, 4, 2).scaled(0.0)
        q = tb.evaluate_policy(mdp, tb.TabularPolicy.uniform(4, 2), 2)
        assert np.all(q.values == 0.0)

    def test_iteration_cap(self):
        with pytest.raises(ConvergenceError) as e:
            tb.evaluate_policy(random_mdp(0, 3, 2), tb.TabularPolicy.uniform(3, 2), 1,
                               max_sweeps=3)
        assert e.value.residual > 0

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
    def test_matches_conditioned_enumeration(self, seed, k):
        mdp = random_mdp(seed, 3, 2)
        probs = np.random.default_rng(seed + 1).dirichlet(np.ones(2), size=3)
        q = tb.solve_plan_values(mdp, tb.TabularPolicy(probs), k)
        ref, _ = conditioned_plan_values(mdp.transition, mdp.reward, mdp.gamma, probs, k)
        for (s, plan), v in ref.items():
            assert q[s, plan] == pytest.approx(v, abs=1e-9)

    def test_iterative_and_direct_solve_agree(self):
        mdp = random_mdp(5, 4, 3)
        pol = tb.TabularPolicy(np.random.default_rng(1).dirichlet(np.ones(3), size=4))
        for k in (1, 2, 3):
            a = tb.evaluate_policy(mdp, pol, k, tol=1e-13)
            b = tb.solve_plan_values(mdp, pol, k)
            np.testing.assert_allclose(a.values, b.values, atol=1e-10)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_marginal_consistent_across_k(self, seed):
        mdp = random_mdp(seed, 4, 2)
        probs = np.random.default_rng(seed).dirichlet(np.ones(2), size=4)
        pol = tb.TabularPolicy(probs)
        ref = policy_state_values(mdp.transition, mdp.reward, mdp.gamma, probs)
        for k in (1, 2, 3):
            v = tb.state_values(mdp, pol, tb.solve_plan_values(mdp, pol, k))
            np.testing.assert_allclose(v, ref, atol=1e-8)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
    def test_contraction(self, seed, k):
        mdp = random_mdp(seed, 4, 2)
        pol = tb.TabularPolicy(np.random.default_rng(seed).dirichlet(np.ones(2), size=4))
        fixed = tb.solve_plan_values(mdp, pol, k).values
        hist = []
        tb.evaluate_policy(mdp, pol, k, tol=1e-11, history=hist)
        errs = [np.max(np.abs(h - fixed)) for h in hist]
        for a, b in zip(errs, errs[1:]):
            assert b <= mdp.gamma ** k * a + 1e-12

    def test_soft_small_alpha_limit(self):
        mdp = random_mdp(8, 3, 3)
        pol = tb.TabularPolicy(np.random.default_rng(2).dirichlet(np.ones(3), size=3))
        for k in (1, 2, 3):
            a = tb.solve_plan_values(mdp, pol, k)
            b = tb.solve_plan_values(mdp, pol, k, soft=True, alpha=1e-6)
            np.testing.assert_allclose(a.values, b.values, atol=1e-4)

    def test_plan_value_bellman_identity_on_m2(self):
        # Q(s, plan) = k-step reward + gamma^k V(s_k) along the (deterministic) path
        mdp = m2_mdp()
        pol = _pi1(0.3)
        v = policy_state_values(mdp.transition, mdp.reward, 0.9, pol.probs)
        q = tb.solve_plan_values(mdp, pol, 3)
        for plan in tb.plan_list(2, 3):
            s, ret = 0, 0.0
            for m, a in enumerate(plan):
                ret += 0.9 ** m * mdp.reward[s, a]
                s = s ^ a
            assert q[0, plan] == pytest.approx(ret + 0.9 ** 3 * v[s], abs=1e-10)


class TestImprovement:

    def test_k1_is_greedy(self):
        mdp = random_mdp(3, 4, 3)
        q = tb.PlanValueTable(1, np.random.default_rng(0).normal(size=(4, 3)))
        pol = tb.improve_policy(mdp, q, tb.TabularPolicy.uniform(4, 3))
        np.testing.assert_array_equal(pol.actions(), np.argmax(q.values, axis=1))

    def test_m2_k2_from_uniform(self):
        mdp = m2_mdp()
        uni = tb.TabularPolicy.uniform(2, 2)
        info = {}
        pol = tb.improve_policy(mdp, tb.solve_plan_values(mdp, uni, 2), uni, info=info)
        assert info["path"] == "exhaustive"
        np.testing.assert_array_equal(pol.actions(), [1, 0])

    def test_soft_softmax_example(self):
        P = np.ones((1, 2, 1))
        mdp = tb.TabularMDP(P, np.zeros((1, 2)), 0.5)
        q = tb.PlanValueTable(1, np.array([[1.0, 0.0]]))
        pol = tb.improve_policy(mdp, q, tb.TabularPolicy.uniform(1, 2), soft=True, alpha=1.0)
        assert pol.probs[0, 0] == pytest.approx(np.e / (np.e + 1), abs=1e-15)

    def test_soft_softmax_minimises_kl(self):
        # numeric minimiser of KL(pi || exp(q)/Z) over a fine grid
        q = np.array([1.0, 0.0])
        grid = np.linspace(1e-6, 1 - 1e-6, 200_001)
        kl = grid * (np.log(grid) - q[0]) + (1 - grid) * (np.log(1 - grid) - q[1])
        assert grid[np.argmin(kl)] == pytest.approx(np.e / (np.e + 1), abs=1e-5)

    def test_heuristic_path_when_search_disabled(self):
        mdp = random_mdp(0, 3, 2)
        uni = tb.TabularPolicy.uniform(3, 2)
        q = tb.solve_plan_values(mdp, uni, 2)
        old = tb.MAX_POLICIES
        try:
            tb.MAX_POLICIES = 1
            with pytest.raises(CapacityError):
                tb.improve_policy(mdp, q, uni, allow_heuristic=False)
            info = {}
            tb.improve_policy(mdp, q, uni, info=info)
            assert info["path"] == "heuristic"
        finally:
            tb.MAX_POLICIES = old

    def test_exhaustive_improvement_never_lowers_state_values(self):
        for seed in range(10):
            mdp = random_mdp(seed, 4, 2)
            pol = tb.TabularPolicy(np.random.default_rng(seed).dirichlet(np.ones(2), size=4))
            for k in (2, 3):
                q = tb.solve_plan_values(mdp, pol, k)
                v_old = tb.state_values(mdp, pol, q)
                new = tb.improve_policy(mdp, q, pol)
                v_new = tb.state_values(mdp, new, tb.solve_plan_values(mdp, new, k))
                assert np.all(v_new >= v_old - 1e-10)


class TestIteration:

    def test_m2_all_k(self):
        for k in (1, 2, 3):
            pol, q, trace = tb.planning_policy_iteration(m2_mdp(), k)
            np.testing.assert_array_equal(pol.actions(), [1, 0])
            np.testing.assert_allclose(tb.state_values(m2_mdp(), pol, q), [9.0, 10.0], atol=1e-8)

    def test_single_action(self):
        mdp = tb.TabularMDP(np.full((3, 1, 3), 1 / 3), np.ones((3, 1)), 0.8)
        pol, _, trace = tb.planning_policy_iteration(mdp, 2)
        assert trace.iterations == 1
        assert np.all(pol.probs == 1.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_value_iteration(self, seed):
        mdp = random_mdp(seed, 5, 3)
        v_star = value_iteration(mdp.transition, mdp.reward, mdp.gamma)
        for k in (1, 2, 3):
            pol, q, _ = tb.planning_policy_iteration(mdp, k)
            np.testing.assert_allclose(tb.state_values(mdp, pol, q), v_star, atol=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_soft_k1_matches_soft_value_iteration(self, seed):
        mdp = random_mdp(100 + seed, 4, 3)
        v_ref, pi_ref = soft_value_iteration(mdp.transition, mdp.reward, mdp.gamma, 0.5)
        pol, q, _ = tb.planning_policy_iteration(mdp, 1, soft=True, alpha=0.5, policy_tol=1e-11)
        np.testing.assert_allclose(tb.state_values(mdp, pol, q, True, 0.5), v_ref, atol=1e-6)
        np.testing.assert_allclose(pol.probs, pi_ref, atol=1e-6)

    def test_soft_k2_agrees_with_k1(self):
        # the optimal soft policy does not depend on how actions are grouped into plans
        mdp = random_mdp(11, 3, 2)
        p1, q1, _ = tb.planning_policy_iteration(mdp, 1, soft=True, alpha=0.3, policy_tol=1e-10)
        p2, q2, _ = tb.planning_policy_iteration(mdp, 2, soft=True, alpha=0.3, policy_tol=1e-10)
        np.testing.assert_allclose(p1.probs, p2.probs, atol=1e-6)
        np.testing.assert_allclose(tb.state_values(mdp, p1, q1, True, 0.3),
                                   tb.state_values(mdp, p2, q2, True, 0.3), atol=1e-6)


class TestOracleAndFormat:

    def test_oracle_m2(self):
        pol, v = tb.oracle_optimal(m2_mdp())
        np.testing.assert_allclose(v, [9.0, 10.0], atol=1e-10)

    def test_oracle_zero_reward(self):
        _, v = tb.oracle_optimal(random_mdp(0, 4, 2).scaled(0.0))
        assert np.all(v == 0.0)

    def test_oracle_single_state(self):
        mdp = tb.TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5)
        assert tb.oracle_optimal(mdp)[1][0] == pytest.approx(2.0, abs=1e-11)

    def test_text_round_trip_is_exact(self, tmp_path):
        mdp = random_mdp(9, 5, 3)
        path = tmp_path / "m.txt"
        tb.save_mdp(mdp, path)
        back = tb.load_mdp(path)
        assert np.array_equal(back.transition, mdp.transition)
        assert np.array_equal(back.reward, mdp.reward)
        assert back.gamma == mdp.gamma
        assert path.read_text().startswith("tabular-mdp v1 5 3 ")

    def test_bad_header(self):
        with pytest.raises(ValueError):
            tb.parse_mdp("mdp 2 2 0.9\n")
