import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bisimlab.bisim import (
    ConvergenceError,
    Measurement,
    ScalingConfig,
    build_lifted_mdp,
    fixed_point_bound,
    g_star_fixed_point,
    lifted_values,
    load_measurement,
    pi_bisim_fixed_point,
    save_measurement,
    scaled_fixed_point,
    value_difference_bound_check,
    wasserstein1,
)
from bisimlab.dataset import OfflineDataset
from bisimlab.mdp import (
    Policy,
    TabularMdp,
    make_garnet,
    normalize_rewards,
    policy_rewards,
    policy_transitions,
)

from conftest import two_absorbing


def scaled_oracle(mdp, pol, sc):
    """Direct linear solve of vec(G) = vec(base) + c_k (P ⊗ P) vec(G)."""
    n = mdp.n_states
    r = policy_rewards(mdp, pol)
    p = policy_transitions(mdp, pol)
    base = sc.c_r * np.abs(r[:, None] - r[None, :])
    g = np.linalg.solve(np.eye(n * n) - sc.c_k * np.kron(p, p), base.ravel())
    return g.reshape(n, n)


class TestWasserstein:
    def test_identity_coupling(self):
        p = np.array([0.2, 0.5, 0.3])
        cost = 1.0 - np.eye(3)
        assert wasserstein1(p, p, cost) == pytest.approx(0.0, abs=1e-12)

    def test_point_masses(self):
        cost = np.array([[0.0, 2.5], [2.5, 0.0]])
        assert wasserstein1([1, 0], [0, 1], cost) == 2.5

    def test_discrete_metric_example(self):
        assert wasserstein1([0.5, 0.5, 0], [0, 0.5, 0.5], 1.0 - np.eye(3)) == pytest.approx(0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
           st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4))
    def test_line_metric_matches_cdf_formula(self, a, b):
        p, q = np.array(a) / sum(a), np.array(b) / sum(b)
        x = np.array([0.0, 0.7, 1.5, 4.0])
        cost = np.abs(x[:, None] - x[None, :])
        oracle = np.sum(np.abs(np.cumsum(p - q))[:-1] * np.diff(x))
        assert wasserstein1(p, q, cost) == pytest.approx(oracle, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5).filter(lambda v: sum(v) > 0.1),
           st.lists(st.floats(0.0, 1.0), min_size=5, max_size=5).filter(lambda v: sum(v) > 0.1))
    def test_discrete_metric_is_total_variation(self, a, b):
        p, q = np.array(a) / sum(a), np.array(b) / sum(b)
        assert wasserstein1(p, q, 1.0 - np.eye(5)) == pytest.approx(0.5 * np.abs(p - q).sum(), abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            wasserstein1([1.0], [0.5, 0.5], np.zeros((2, 2)))


class TestPiBisimulation:
    def test_bisimilar_states(self):
        t = np.zeros((3, 1, 3))
        t[0, 0, 2] = t[1, 0, 2] = t[2, 0, 2] = 1.0
        mdp = TabularMdp(t, [[1.0], [1.0], [0.0]], 0.9)
        g = pi_bisim_fixed_point(mdp, Policy.uniform(3, 1)).g
        assert g[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_two_absorbing(self):
        g = pi_bisim_fixed_point(two_absorbing(), Policy.uniform(2, 1), tol=1e-12).g
        assert g[0, 1] == pytest.approx(2.0, abs=1e-10)

    def test_metric_and_value_bound(self, garnet5):
        mdp, pol = garnet5
        m = pi_bisim_fixed_point(mdp, pol, tol=1e-10)
        m.check()
        rep = value_difference_bound_check(mdp, pol, m, m.scaling)
        assert rep["violations"] == 0 and rep["notes"] == []


class TestScaled:
    def test_matches_linear_solve(self, garnet5):
        mdp, pol = garnet5
        sc = ScalingConfig(0.7, 0.8)
        g = scaled_fixed_point(mdp, pol, sc, tol=1e-12).g
        np.testing.assert_allclose(g, scaled_oracle(mdp, pol, sc), atol=1e-9)

    def test_two_absorbing(self):
        g = scaled_fixed_point(two_absorbing(), Policy.uniform(2, 1), ScalingConfig(1.0, 0.5), 1e-12).g
        assert g[0, 1] == pytest.approx(2.0, abs=1e-10)

    def test_reward_scaled_bound(self):
        mdp = normalize_rewards(make_garnet(8, 3, 4, 0.3, seed=5, discount=0.95))
        sc = ScalingConfig.reward_scaled(0.95)
        g = scaled_fixed_point(mdp, Policy.uniform(8, 3), sc, tol=1e-12).g
        assert g.max() <= 1.0 + 1e-9
        assert g.max() <= fixed_point_bound(mdp, sc) + 1e-9

    def test_deterministic_mdp_equals_pi_bisim(self):
        mdp = make_garnet(6, 2, 1, 0.0, seed=2, discount=0.8)
        pol = Policy.deterministic([0, 1, 1, 0, 1, 0], 2)
        sc = ScalingConfig(1.0, 0.8)
        a = scaled_fixed_point(mdp, pol, sc, tol=1e-12).g
        b = pi_bisim_fixed_point(mdp, pol, tol=1e-12, scaling=sc).g
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_kind_label(self, garnet5):
        mdp, pol = garnet5
        assert scaled_fixed_point(mdp, pol, ScalingConfig(1.0, 0.9)).kind == "generalized"
        assert scaled_fixed_point(mdp, pol, ScalingConfig(0.1, 0.9)).kind == "scaled"

    def test_non_convergence_carries_history(self, garnet5):
        mdp, pol = garnet5
        with pytest.raises(ConvergenceError) as err:
            scaled_fixed_point(mdp, pol, ScalingConfig(1.0, 0.9), tol=1e-12, max_iter=5)
        assert len(err.value.history) == 5


class TestLifted:
    def test_single_state(self):
        mdp = TabularMdp(np.ones((1, 1, 1)), [[0.3]], 0.9)
        lifted = build_lifted_mdp(mdp, Policy.uniform(1, 1), ScalingConfig(1.0, 0.9))
        assert lifted.mdp.n_states == 1 and lifted.mdp.reward[0, 0] == 0.0

    def test_reward_table(self):
        mdp = make_garnet(4, 2, 2, 0.0, seed=1)
        pol = Policy.uniform(4, 2)
        lifted = build_lifted_mdp(mdp, pol, ScalingConfig(0.5, 0.9))
        r = policy_rewards(mdp, pol)
        assert lifted.mdp.n_states == 16
        for i, j in itertools.product(range(4), repeat=2):
            assert lifted.mdp.reward[lifted.index(i, j), 0] == pytest.approx(0.5 * abs(r[i] - r[j]))
            assert lifted.pair(lifted.index(i, j)) == (i, j)

    def test_matches_scaled(self, garnet5):
        mdp, pol = garnet5
        sc = ScalingConfig(0.4, 0.85)
        v = lifted_values(build_lifted_mdp(mdp, pol, sc))
        assert np.max(np.abs(v - scaled_fixed_point(mdp, pol, sc, tol=1e-12).g)) <= 1e-6

    def test_size_cap(self):
        mdp = make_garnet(10, 1, 1, 0.0, seed=0)
        with pytest.raises(ValueError, match="cap"):
            build_lifted_mdp(mdp, Policy.uniform(10, 1), ScalingConfig(), cap=50)


def g_star_brute_force(reward, transition, support, sc, iters=2000):
    n, m = reward.shape
    g = {}
    keys = list(itertools.product(range(n), range(m), range(n), range(m)))
    for k in keys:
        g[k] = 0.0
    for _ in range(iters):
        new = {}
        for i, a, j, b in keys:
            cont = 0.0
            for k in range(n):
                for l in range(n):
                    w = transition[i, a, k] * transition[j, b, l]
                    if w == 0:
                        continue
                    vals = [g[(k, x, l, y)] for x in range(m) for y in range(m)
                            if support[k, x] and support[l, y]]
                    cont += w * (max(vals) if vals else 0.0)
            new[(i, a, j, b)] = sc.c_r * abs(reward[i, a] - reward[j, b]) + sc.c_k * cont
        g = new
    out = np.zeros((n, m, n, m))
    for k, v in g.items():
        out[k] = v
    return out


class TestGStar:
    def test_matches_brute_force_on_partial_support(self):
        mdp = make_garnet(3, 2, 1, 0.0, seed=6, discount=0.5)
        # behavior never takes action 1 in state 0
        pol = Policy(np.array([[1.0, 0.0], [0.5, 0.5], [0.3, 0.7]]))
        sc = ScalingConfig(1.0, 0.5)
        gs = g_star_fixed_point(mdp, sc, tol=1e-13, policy=pol)
        oracle = g_star_brute_force(mdp.reward, mdp.transition, pol.probs > 0, sc, iters=80)
        np.testing.assert_allclose(gs.g, oracle, atol=1e-10)

    def test_single_action_equals_scaled(self):
        mdp = make_garnet(5, 1, 3, 0.0, seed=2)
        pol = Policy.uniform(5, 1)
        sc = ScalingConfig(1.0, 0.9)
        gs = g_star_fixed_point(mdp, sc, tol=1e-12, policy=pol)
        np.testing.assert_allclose(gs.g[:, 0, :, 0], scaled_fixed_point(mdp, pol, sc, 1e-12).g, atol=1e-9)

    def test_disjoint_self_loops_dataset(self):
        ds = OfflineDataset([0, 1], [0, 0], [0.0, 1.0], [0, 1], [False, False], 2, 1)
        gs = g_star_fixed_point(ds, ScalingConfig(1.0, 0.5), tol=1e-13)
        assert gs.state_max()[0, 1] == pytest.approx(2.0, abs=1e-11)

    def test_frontier_flagged(self):
        ds = OfflineDataset([0, 1], [0, 0], [0.0, 1.0], [2, 2], [False, False], 3, 1)
        gs = g_star_fixed_point(ds, ScalingConfig(1.0, 0.5))
        assert gs.frontier_states == frozenset({2})
        assert gs.state_max()[0, 1] == pytest.approx(1.0)


class TestValueBoundDiagnostic:
    def test_zero_reward(self):
        mdp = make_garnet(4, 2, 2, 1.0, seed=0)
        pol = Policy.uniform(4, 2)
        rep = value_difference_bound_check(mdp, pol, np.zeros((4, 4)), ScalingConfig(1.0, 0.9))
        assert rep["max_value_gap"] == 0.0 and rep["violations"] == 0

    def test_mismatched_scaling_noted(self, garnet5):
        mdp, pol = garnet5
        sc = ScalingConfig(1.0, 0.5)
        rep = value_difference_bound_check(mdp, pol, scaled_fixed_point(mdp, pol, sc), sc)
        assert any("mismatched scaling" in n for n in rep["notes"])


class TestMeasurementIo:
    def test_round_trip(self, tmp_path, garnet5):
        mdp, pol = garnet5
        m = scaled_fixed_point(mdp, pol, ScalingConfig(0.3, 0.9))
        save_measurement(m, tmp_path / "g.csv")
        back = load_measurement(tmp_path / "g.csv")
        np.testing.assert_array_equal(back.g, m.g)
        assert back.scaling == m.scaling and back.kind == m.kind

    def test_check_rejects_asymmetry(self):
        with pytest.raises(ValueError, match="symmetric"):
            Measurement(np.array([[0.0, 1.0], [2.0, 0.0]])).check()

    def test_check_rejects_triangle_violation(self):
        g = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
        with pytest.raises(ValueError, match="triangle"):
            Measurement(g, "pi_bisim").check()
