import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bisimlab.bisim import ConvergenceError, ScalingConfig, g_star_fixed_point, scaled_fixed_point
from bisimlab.dataset import OfflineDataset
from bisimlab.expectile import (
    ExpectileConfig,
    contraction_probe,
    expectile_fixed_point,
    expectile_scalar,
    expectile_sweep,
    monotonicity_probe,
    operator_ratio,
    residual_samples,
    tau_limit_probe,
    weighted_expectile,
)
from bisimlab.mdp import Policy, TabularMdp, make_garnet


def two_action_chain(discount=0.9):
    """Deterministic 4-state chain; action 0 stays, action 1 moves right."""
    n = 4
    t = np.zeros((n, 2, n))
    for s in range(n):
        t[s, 0, s] = 1.0
        t[s, 1, min(s + 1, n - 1)] = 1.0
    r = np.array([[0.1, 0.9], [0.4, 0.2], [0.7, 0.0], [0.3, 0.6]])
    return TabularMdp(t, r, discount)


def single_action_chain(rewards, discount):
    """Deterministic single-action chain ending in an absorbing state."""
    n = len(rewards)
    t = np.zeros((n, 1, n))
    for s in range(n):
        t[s, 0, min(s + 1, n - 1)] = 1.0
    return TabularMdp(t, np.array(rewards, dtype=float)[:, None], discount)


class TestScalar:
    def test_mean_at_half(self):
        assert expectile_scalar([0.0, 1.0], tau=0.5) == pytest.approx(0.5, abs=1e-10)

    def test_closed_form_ninety(self):
        assert expectile_scalar([0.0, 1.0], tau=0.9) == pytest.approx(0.9, abs=1e-10)

    def test_approaches_max(self):
        vals = [0.2, 1.3, -0.5, 0.9]
        assert expectile_scalar(vals, tau=1 - 1e-7) == pytest.approx(1.3, abs=1e-5)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            expectile_scalar([0.0, 1.0], [0.7, 0.7])
        with pytest.raises(ValueError):
            expectile_scalar([], tau=0.5)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=7),
           st.floats(0.01, 0.99), st.integers(0, 2**31))
    def test_vectorized_matches_bisection(self, values, tau, seed):
        w = np.random.default_rng(seed).uniform(0.1, 1.0, len(values))
        w /= w.sum()
        got = weighted_expectile(np.array(values), w, tau)
        assert got == pytest.approx(expectile_scalar(values, w, tau), abs=1e-9)


class TestSweep:
    def test_increment_example(self):
        # one state pair (0, 1) with a single action; ε̂ = 1 when g = 0
        mdp = TabularMdp(np.array([[[0.0, 0.0, 1.0]], [[0.0, 0.0, 1.0]], [[0.0, 0.0, 1.0]]]),
                         [[0.0], [1.0], [0.0]], 0.9)
        cfg = ExpectileConfig(tau=0.6, alpha=0.1, scaling=ScalingConfig(1.0, 0.9))
        g = expectile_sweep(np.zeros((3, 3)), mdp, cfg, Policy.uniform(3, 1)).g
        assert g[0, 1] == pytest.approx(0.12, abs=1e-15)

    def test_fixed_point_is_stationary(self, garnet5):
        mdp, pol = garnet5
        sc = ScalingConfig(0.5, 0.9)
        g = scaled_fixed_point(mdp, pol, sc, tol=1e-14).g
        out = expectile_sweep(g, mdp, ExpectileConfig(0.5, 0.5, sc), pol).g
        np.testing.assert_allclose(out, g, atol=1e-12)

    def test_small_alpha_small_step(self, garnet5):
        mdp, pol = garnet5
        g0 = np.random.default_rng(0).uniform(0, 1, (5, 5))
        out = expectile_sweep(g0, mdp, ExpectileConfig(0.7, 1e-12), pol).g
        np.testing.assert_allclose(out, g0, atol=1e-10)

    def test_rejects_non_finite(self, garnet5):
        mdp, pol = garnet5
        with pytest.raises(ValueError):
            expectile_sweep(np.full((5, 5), np.nan), mdp, ExpectileConfig(), pol)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ExpectileConfig(alpha=0.6)
        with pytest.raises(ValueError):
            ExpectileConfig(tau=1.0)
        with pytest.raises(ValueError):
            ExpectileConfig(reward_mode="both")


class TestFixedPoint:
    def test_half_recovers_scaled(self, garnet5):
        mdp, pol = garnet5
        sc = ScalingConfig(1.0, 0.9)
        g = expectile_fixed_point(mdp, ExpectileConfig(0.5, 0.5, sc, tol=1e-11), pol).g
        np.testing.assert_allclose(g, scaled_fixed_point(mdp, pol, sc, tol=1e-12).g, atol=1e-6)

    def test_single_action_deterministic_invariant_in_tau(self):
        mdp = single_action_chain([0.0, 0.3, 1.0, 0.2, 0.5], 0.8)
        pol = Policy.uniform(5, 1)
        tables = [expectile_fixed_point(mdp, ExpectileConfig(t, tol=1e-12), pol, "backup").g
                  for t in (0.3, 0.5, 0.8)]
        for t in tables[1:]:
            np.testing.assert_allclose(t, tables[0], atol=1e-9)

    @pytest.mark.parametrize("mode", ["policy", "action"])
    def test_sweep_matches_backup(self, garnet5, mode):
        mdp, pol = garnet5
        cfg = ExpectileConfig(0.8, 0.5, ScalingConfig(0.1, 0.9), tol=1e-12, reward_mode=mode)
        a = expectile_fixed_point(mdp, cfg, pol, "sweep").g
        b = expectile_fixed_point(mdp, cfg, pol, "backup").g
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_iteration_count_consistent_with_rate(self, garnet5):
        mdp, pol = garnet5
        cfg = ExpectileConfig(0.7, 0.5, ScalingConfig(0.1, 0.9), tol=1e-8)
        m = expectile_fixed_point(mdp, cfg, pol)
        h = m.history
        # successive sup-norm changes shrink at least as fast as γ_τ
        assert all(b <= cfg.gamma_tau * a + 1e-12 for a, b in zip(h, h[1:]))

    def test_bounded_by_in_sample_max(self):
        mdp = make_garnet(5, 2, 2, 0.0, seed=4, discount=0.9)
        pol = Policy.random(5, 2, np.random.default_rng(1), min_prob=0.1)
        sc = ScalingConfig(0.1, 0.9)
        upper = g_star_fixed_point(mdp, sc, tol=1e-12, policy=pol).state_max()
        for tau in (0.5, 0.9, 0.99):
            g = expectile_fixed_point(mdp, ExpectileConfig(tau, scaling=sc, tol=1e-11, reward_mode="action"),
                                      pol, "backup").g
            assert np.all(g <= upper + 1e-8)

    def test_non_convergence_raises_with_history(self, garnet5):
        mdp, pol = garnet5
        with pytest.raises(ConvergenceError) as err:
            expectile_fixed_point(mdp, ExpectileConfig(0.5, 0.1, tol=1e-12, max_sweeps=7), pol)
        assert len(err.value.history) == 7

    def test_unknown_method(self, garnet5):
        mdp, pol = garnet5
        with pytest.raises(ValueError):
            expectile_fixed_point(mdp, ExpectileConfig(), pol, "newton")

    def test_dataset_source_leaves_unseen_pairs(self):
        ds = OfflineDataset([0, 1], [0, 0], [0.0, 1.0], [1, 0], [False, False], 3, 1)
        g = expectile_fixed_point(ds, ExpectileConfig(0.7, tol=1e-11), method="backup").g
        assert g[0, 2] == 0.0 and g[0, 1] > 0.0

    def test_residual_samples_vanish_at_fixed_point(self):
        mdp = single_action_chain([0.0, 1.0, 0.0, 0.5], 0.9)
        pol = Policy.uniform(4, 1)
        cfg = ExpectileConfig(0.5, tol=1e-13)
        g = expectile_fixed_point(mdp, cfg, pol, "backup")
        samples = residual_samples(g, mdp, cfg, pol)
        assert len(samples) == 16
        assert max(abs(s.epsilon_hat) for s in samples) < 1e-10


class TestContraction:
    def test_gamma_tau_example(self):
        assert ExpectileConfig(0.5, 0.5, ScalingConfig(1.0, 0.9)).gamma_tau == pytest.approx(0.95)

    def test_symmetry_in_tau(self):
        a = ExpectileConfig(0.9, 0.3, ScalingConfig(1.0, 0.9)).gamma_tau
        b = ExpectileConfig(0.1, 0.3, ScalingConfig(1.0, 0.9)).gamma_tau
        assert a == pytest.approx(b, abs=1e-15)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
    @pytest.mark.parametrize("mode", ["policy", "action"])
    def test_ratios_within_modulus(self, garnet5, tau, mode):
        mdp, pol = garnet5
        cfg = ExpectileConfig(tau, 0.5, ScalingConfig(1.0, 0.9), reward_mode=mode)
        rep = contraction_probe(cfg, mdp, pol, 200, seed=11)
        assert rep.passed, rep.details
        assert rep.details["max_ratio"] <= cfg.gamma_tau + 1e-10

    def test_equal_inputs_ratio_zero(self, garnet5):
        mdp, pol = garnet5
        g = np.random.default_rng(2).uniform(0, 1, (5, 5))
        assert operator_ratio(ExpectileConfig(0.5, 0.5), mdp, g, g.copy(), pol) == 0.0


class TestMonotonicity:
    def test_single_tau_vacuous(self, garnet5):
        mdp, pol = garnet5
        assert monotonicity_probe(mdp, [0.5], ExpectileConfig(), pol).passed

    @pytest.mark.parametrize("mode", ["policy", "action"])
    def test_random_mdp(self, garnet5, mode):
        mdp, pol = garnet5
        cfg = ExpectileConfig(scaling=ScalingConfig(0.1, 0.9), tol=1e-11, reward_mode=mode)
        rep = monotonicity_probe(mdp, [0.3, 0.5, 0.7, 0.9], cfg, pol)
        assert rep.passed and rep.max_violation <= 1e-8

    def test_zero_reward_all_zero(self):
        mdp = make_garnet(4, 2, 2, 0.0, seed=0)
        mdp = TabularMdp(mdp.transition, np.zeros((4, 2)), mdp.discount)
        pol = Policy.uniform(4, 2)
        for t in (0.2, 0.8):
            g = expectile_fixed_point(mdp, ExpectileConfig(t), pol, "backup").g
            assert np.all(g == 0.0)


class TestTauLimit:
    def test_errors_strictly_decrease_on_chain(self):
        mdp = two_action_chain()
        pol = Policy.uniform(4, 2)
        cfg = ExpectileConfig(scaling=ScalingConfig(0.1, 0.9), tol=1e-12)
        rep = tau_limit_probe(mdp, [0.9, 0.99, 0.999], cfg, policy=pol)
        e = rep.details["errors"]
        assert e[0] > e[1] > e[2]
        assert rep.passed

    def test_stochastic_mdp_rejected(self, garnet5):
        mdp, pol = garnet5
        with pytest.raises(ValueError, match="deterministic"):
            tau_limit_probe(mdp, [0.9], ExpectileConfig(), policy=pol)

    def test_single_action_zero_error(self):
        mdp = single_action_chain([0.0, 0.3, 1.0, 0.2, 0.5], 0.8)
        cfg = ExpectileConfig(scaling=ScalingConfig(0.2, 0.8), tol=1e-12)
        rep = tau_limit_probe(mdp, [0.6, 0.9, 0.99], cfg, policy=Policy.uniform(5, 1))
        assert max(rep.details["errors"]) <= 1e-9

    def test_unsupported_actions_excluded(self):
        mdp = two_action_chain()
        # action 1 is never taken, so the max reduces to the single supported action
        pol = Policy.deterministic([0, 0, 0, 0], 2)
        cfg = ExpectileConfig(scaling=ScalingConfig(0.1, 0.9), tol=1e-12)
        rep = tau_limit_probe(mdp, [0.9, 0.999], cfg, policy=pol)
        assert max(rep.details["errors"]) <= 1e-9
