import numpy as np
import pytest

from sucrep import mdp_core as mc
from sucrep.errors import DimensionError, DomainError, StateError

from conftest import SWAP, series_sr


class TestFiniteMdp:
    def test_rejects_non_stochastic_rows(self):
        P = np.array([[[0.5, 0.4]], [[0.0, 1.0]]])
        with pytest.raises(DomainError):
            mc.FiniteMdp(P, np.array([0.5, 0.5]))

    def test_rejects_bad_initial_dist(self):
        with pytest.raises(DomainError):
            mc.FiniteMdp(SWAP[:, None, :], np.array([0.7, 0.7]))

    def test_rejects_bad_shape(self):
        with pytest.raises(DimensionError):
            mc.FiniteMdp(SWAP, np.array([0.5, 0.5]))

    def test_policy_row_check(self):
        with pytest.raises(DomainError):
            mc.TabularPolicy(np.array([[0.6, 0.6]]))


class TestPolicyTransition:
    def test_deterministic_selection(self, rng):
        mdp = mc.random_mdp(6, 3, rng)
        pol = mc.TabularPolicy.deterministic([1] * 6, 3)
        np.testing.assert_array_equal(mc.policy_transition(mdp, pol), mdp.transitions[:, 1, :])

    def test_single_state(self):
        mdp = mc.FiniteMdp(np.ones((1, 1, 1)), np.ones(1))
        np.testing.assert_array_equal(mc.policy_transition(mdp, mc.TabularPolicy.uniform(1, 1)), [[1.0]])

    def test_hand_enumerated_mixture(self):
        P = np.zeros((2, 2, 2))
        P[0, 0] = [0, 1]
        P[0, 1] = [1, 0]
        P[1, :, 1] = 1
        mdp = mc.FiniteMdp(P, np.array([1.0, 0.0]))
        pol = mc.TabularPolicy(np.array([[0.5, 0.5], [1.0, 0.0]]))
        np.testing.assert_allclose(mc.policy_transition(mdp, pol)[0], [0.5, 0.5])

    def test_shape_mismatch(self, rng):
        mdp = mc.random_mdp(4, 2, rng)
        with pytest.raises(DimensionError):
            mc.policy_transition(mdp, mc.TabularPolicy.uniform(4, 3))


class TestSuccessorRepresentation:
    def test_gamma_zero_is_p(self, rng):
        p = mc.random_stochastic(5, 5, rng)
        np.testing.assert_allclose(mc.successor_representation(p, 0.0).m, p)

    def test_self_loops(self):
        sm = mc.successor_representation(np.eye(3), 0.5)
        np.testing.assert_allclose(sm.m, 2 * np.eye(3))
        np.testing.assert_allclose(mc.normalize_sm(sm).m, np.eye(3))

    def test_swap_chain(self):
        sm = mc.successor_representation(SWAP, 0.5)
        np.testing.assert_allclose(sm.m, [[2 / 3, 4 / 3], [4 / 3, 2 / 3]], atol=1e-14)
        np.testing.assert_allclose(sm.m, series_sr(SWAP, 0.5), atol=1e-12)
        np.testing.assert_allclose(mc.normalize_sm(sm).m, [[1 / 3, 2 / 3], [2 / 3, 1 / 3]], atol=1e-14)

    @pytest.mark.parametrize("gamma", [0.5, 0.9, 0.99])
    def test_series_equivalence(self, rng, gamma):
        p = mc.random_stochastic(12, 12, rng)
        np.testing.assert_allclose(mc.successor_representation(p, gamma).m, series_sr(p, gamma, 1e-10), atol=1e-7)

    @pytest.mark.parametrize("gamma", [1.0, 1.5, -0.1])
    def test_rejects_gamma(self, gamma):
        with pytest.raises(DomainError):
            mc.successor_representation(SWAP, gamma)

    def test_double_normalize(self):
        sm = mc.normalize_sm(mc.successor_representation(SWAP, 0.5))
        with pytest.raises(StateError):
            mc.normalize_sm(sm)

    def test_normalize_gamma_zero(self, rng):
        p = mc.random_stochastic(4, 4, rng)
        np.testing.assert_allclose(mc.normalized_sr(p, 0.0), p)

    def test_bellman_residual_small(self, rng):
        p = mc.random_stochastic(30, 30, rng)
        assert mc.bellman_residual(mc.successor_representation(p, 0.99), p) <= 1e-8


class TestSuccessorFeatures:
    def test_identity_features(self, rng):
        sm = mc.successor_representation(mc.random_stochastic(4, 4, rng), 0.8)
        np.testing.assert_allclose(mc.successor_features(sm, np.eye(4)), sm.m)

    def test_ones_column(self, rng):
        sm = mc.normalize_sm(mc.successor_representation(mc.random_stochastic(5, 5, rng), 0.9))
        np.testing.assert_allclose(mc.successor_features(sm, np.ones((5, 1))), np.ones((5, 1)), atol=1e-12)

    def test_elementwise_oracle(self, rng):
        sm = mc.successor_representation(mc.random_stochastic(3, 3, rng), 0.7)
        phi = rng.standard_normal((3, 2))
        expect = np.array([[sum(sm.m[s, t] * phi[t, k] for t in range(3)) for k in range(2)] for s in range(3)])
        np.testing.assert_allclose(mc.successor_features(sm, phi), expect, atol=1e-14)

    def test_shape_mismatch(self):
        sm = mc.successor_representation(SWAP, 0.5)
        with pytest.raises(DimensionError):
            mc.successor_features(sm, np.ones((3, 1)))


class TestOccupancy:
    def test_identity_dynamics(self):
        p0 = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(mc.discounted_occupancy(np.eye(3), p0, 0.9).d, p0)

    def test_gamma_zero(self, rng):
        p = mc.random_stochastic(4, 4, rng)
        p0 = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_allclose(mc.discounted_occupancy(p, p0, 0.0).d, p0 @ p)

    def test_swap_chain(self):
        np.testing.assert_allclose(mc.discounted_occupancy(SWAP, np.array([1.0, 0.0]), 0.5).d, [1 / 3, 2 / 3])

    def test_from_start_includes_s0(self):
        d = mc.discounted_occupancy(SWAP, np.array([1.0, 0.0]), 0.5, from_start=True).d
        np.testing.assert_allclose(d, 0.5 * np.array([1, 0]) + 0.5 * np.array([1 / 3, 2 / 3]))

    def test_sums_to_one(self, rng):
        d = mc.discounted_occupancy(mc.random_stochastic(9, 9, rng), np.full(9, 1 / 9), 0.95).d
        assert abs(d.sum() - 1) <= 1e-10 and (d >= 0).all()


class TestMixture:
    def test_single_policy(self, rng):
        pol = mc.random_policy(5, 3, rng)
        occ = mc.OccupancyVector(np.full(5, 0.2), 0.9)
        np.testing.assert_allclose(mc.mixture_policy([pol], [1.0], [occ]).probs, pol.probs)

    def test_symmetric_pair(self):
        a = mc.TabularPolicy.deterministic([0, 0], 2)
        b = mc.TabularPolicy.deterministic([1, 1], 2)
        occ = mc.OccupancyVector(np.array([0.5, 0.5]), 0.9)
        mix = mc.mixture_policy([a, b], [0.5, 0.5], [occ, occ])
        np.testing.assert_allclose(mix.probs, 0.5)

    def test_mixing_coefficients(self):
        np.testing.assert_allclose(mc.mixing_coefficients([0.25, 0.75], [0.4, 0.2]), [0.4, 0.6])

    def test_unvisited_state_uniform(self):
        a = mc.TabularPolicy.deterministic([0, 0], 2)
        occ = mc.OccupancyVector(np.array([1.0, 0.0]), 0.9)
        np.testing.assert_allclose(mc.mixture_policy([a], [1.0], [occ]).probs[1], [0.5, 0.5])

    def test_empty(self):
        with pytest.raises(ValueError):
            mc.mixture_policy([], [], [])

    def test_same_occupancy_as_members(self, rng):
        mdp = mc.random_mdp(7, 3, rng)
        pols = [mc.random_policy(7, 3, rng) for _ in range(3)]
        w = np.array([0.2, 0.5, 0.3])
        occ = [mc.discounted_occupancy(mc.policy_transition(mdp, p), mdp.initial_dist, 0.9, from_start=True)
               for p in pols]
        mix = mc.mixture_policy(pols, w, occ)
        d_mix = mc.discounted_occupancy(mc.policy_transition(mdp, mix), mdp.initial_dist, 0.9, from_start=True).d
        np.testing.assert_allclose(d_mix, sum(wi * o.d for wi, o in zip(w, occ)), atol=1e-12)


class TestGeometric:
    def test_gamma_zero(self, rng):
        assert all(mc.geometric_sample(0.0, 50, rng) == 1 for _ in range(20))

    def test_single_support(self, rng):
        np.testing.assert_array_equal(mc.geometric_offsets(0.9, np.ones(100, dtype=int), rng), 1)

    def test_zero_max_offset(self, rng):
        with pytest.raises(DomainError):
            mc.geometric_sample(0.5, 0, rng)

    def test_long_horizon_mean(self, rng):
        k = mc.geometric_offsets(0.99, np.full(10**6, 10**9), rng)
        assert abs(k.mean() - 100.0) / 100.0 <= 0.02

    def test_pmf_normalized(self):
        pmf = mc.truncated_geometric_pmf(0.9, 7)
        assert abs(pmf.sum() - 1) < 1e-15
        np.testing.assert_allclose(pmf[1:] / pmf[:-1], 0.9)

    def test_support_bounds(self, rng):
        kmax = rng.integers(1, 20, size=5000)
        k = mc.geometric_offsets(0.95, kmax, rng)
        assert (k >= 1).all() and (k <= kmax).all()


class TestChains:
    @pytest.mark.parametrize("p", [mc.ring_walk(8), mc.ring_walk(9, 0.5), mc.grid_walk(3, 4), mc.complete_walk(5)])
    def test_symmetric_stochastic(self, p):
        np.testing.assert_allclose(p.sum(1), 1.0)
        np.testing.assert_allclose(p, p.T)

    def test_builtin_ring_is_lazy(self):
        np.testing.assert_allclose(np.diag(mc.BUILTIN_CHAINS["ring"](6)), 0.5)


class TestTextFormat:
    def test_round_trip(self, rng):
        mdp = mc.random_mdp(4, 2, rng)
        pol = mc.random_policy(4, 2, rng)
        mdp2, pol2, gamma = mc.parse_mdp_text(mc.format_mdp_text(mdp, pol, 0.9))
        np.testing.assert_array_equal(mdp2.transitions, mdp.transitions)
        np.testing.assert_array_equal(pol2.probs, pol.probs)
        assert gamma == 0.9

    def test_defaults(self):
        mdp, pol, gamma = mc.parse_mdp_text("n_states 2\nn_actions 1\n# swap\nP\n0 1\n1 0\n")
        assert gamma is None
        np.testing.assert_allclose(mdp.initial_dist, [0.5, 0.5])
        np.testing.assert_allclose(pol.probs, 1.0)

    @pytest.mark.parametrize("text", ["n_states 2\nP\n0 1\n1 0\n", "n_states 2\nn_actions 1\nP\n0 1\n",
                                      "n_states 2\nn_actions 1\n"])
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            mc.parse_mdp_text(text)
