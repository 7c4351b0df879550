import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sucrep import envgen as eg
from sucrep import evalkit as ev
from sucrep import linrep as lr
from sucrep import mdp_core as mc
from sucrep import nnkit as nk
from sucrep import trainer as tr

seeds = st.integers(0, 2**32 - 1)
gammas = st.sampled_from([0.0, 0.3, 0.5, 0.9, 0.99])
FAST = settings(max_examples=40, deadline=None)


def instance(seed, n, a=2):
    rng = np.random.default_rng(seed)
    mdp = mc.random_mdp(n, a, rng)
    return mdp, mc.random_policy(n, a, rng), rng


class TestSuccessorProperties:
    @FAST
    @given(seeds, st.integers(1, 12), gammas)
    def test_bellman_and_stochastic(self, seed, n, gamma):
        mdp, pol, _ = instance(seed, n)
        p = mc.policy_transition(mdp, pol)
        sm = mc.successor_representation(p, gamma)
        assert mc.bellman_residual(sm, p) <= 1e-8
        np.testing.assert_allclose(mc.normalized_sr(p, gamma).sum(1), 1.0, atol=1e-8)
        assert (sm.m >= -1e-12).all()

    @FAST
    @given(seeds, st.integers(2, 8), st.integers(2, 4), st.sampled_from([0.5, 0.9]))
    def test_mixture_occupancy(self, seed, n, j, gamma):
        rng = np.random.default_rng(seed)
        mdp = mc.random_mdp(n, 3, rng)
        pols = [mc.random_policy(n, 3, rng) for _ in range(j)]
        w = rng.dirichlet(np.ones(j))
        occ = [mc.discounted_occupancy(mc.policy_transition(mdp, q), mdp.initial_dist, gamma, from_start=True)
               for q in pols]
        mix = mc.mixture_policy(pols, w, occ)
        got = mc.discounted_occupancy(mc.policy_transition(mdp, mix), mdp.initial_dist, gamma, from_start=True)
        np.testing.assert_allclose(got.d, sum(wi * o.d for wi, o in zip(w, occ)), atol=1e-9)

    @FAST
    @given(gammas, st.integers(1, 200))
    def test_truncated_pmf(self, gamma, k):
        pmf = mc.truncated_geometric_pmf(gamma, k)
        assert pmf.shape == (k,)
        assert abs(pmf.sum() - 1.0) <= 1e-12
        assert (np.diff(pmf) <= 1e-15).all()

    @FAST
    @given(seeds, gammas, st.lists(st.integers(1, 50), min_size=1, max_size=30))
    def test_offsets_in_range(self, seed, gamma, caps):
        k = mc.geometric_offsets(gamma, np.array(caps), np.random.default_rng(seed))
        assert ((k >= 1) & (k <= np.array(caps))).all()


class TestLinearProperties:
    @FAST
    @given(seeds, st.integers(2, 10), st.sampled_from([0.5, 0.9]))
    def test_jensen(self, seed, n, gamma):
        mdp, pol, rng = instance(seed, n)
        T = mc.normalized_sr(mc.policy_transition(mdp, pol), gamma)
        d = int(rng.integers(1, n + 1))
        phi = rng.standard_normal((n, d))
        psi = rng.standard_normal((d, d))
        assert lr.byol_objective(phi, psi, T) - lr.jensen_lower_bound(phi, psi, T) >= -1e-12

    @FAST
    @given(seeds, st.integers(3, 10))
    def test_surrogate_above_eckart_young(self, seed, n):
        rng = np.random.default_rng(seed)
        a = mc.random_stochastic(n, n, rng)
        T = mc.normalized_sr((a + a.T) / 2, 0.9)
        d = int(rng.integers(1, n))
        phi = lr.orthonormal_init(n, d, rng)
        psi = lr.optimal_predictor(phi, T)
        assert lr.surrogate_error(phi, psi, T) >= lr.eckart_young_error(T, d) - 1e-10

    @FAST
    @given(seeds, st.integers(1, 8), st.integers(1, 8))
    def test_qr_retract_orthonormal(self, seed, extra, d):
        x = np.random.default_rng(seed).standard_normal((d + extra, d))
        assert lr.ortho_defect(lr.qr_retract(x)) <= 1e-12

    @FAST
    @given(seeds, st.integers(2, 16), st.integers(1, 6))
    def test_infonce_shift(self, seed, n, d):
        rng = np.random.default_rng(seed)
        psi, phi = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        psi2 = np.hstack([psi, rng.standard_normal((n, 1))])
        phi2 = np.hstack([phi, np.ones((n, 1))])
        assert abs(nk.infonce_loss(psi2, phi2) - nk.infonce_loss(psi, phi)) <= 1e-9


class TestNnProperties:
    @FAST
    @given(seeds, st.integers(1, 10), st.integers(1, 8))
    def test_softmax_and_cosine(self, seed, rows, cols):
        rng = np.random.default_rng(seed)
        x = 10 * rng.standard_normal((rows, cols))
        np.testing.assert_allclose(nk.softmax(x).sum(-1), 1.0, atol=1e-12)
        c = nk.cosine_similarity(x, rng.standard_normal((rows, cols)))
        assert (np.abs(c) <= 1.0).all()

    @FAST
    @given(seeds, st.integers(1, 8))
    def test_ce_at_least_target_entropy(self, seed, d):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((5, d)), rng.standard_normal((5, d))
        pb = nk.softmax(b)
        entropy = -(pb * np.log(pb)).sum(-1)
        assert (nk.f_ce(a, b) >= entropy - 1e-12).all()

    @FAST
    @given(seeds, st.floats(0.0, 1.0))
    def test_ema_convex(self, seed, tau):
        rng = np.random.default_rng(seed)
        online = [rng.standard_normal(3)]
        target = nk.EmaTarget([rng.standard_normal(3)], tau)
        new = nk.ema_update(target, online).params[0]
        lo = np.minimum(online[0], target.params[0]) - 1e-12
        hi = np.maximum(online[0], target.params[0]) + 1e-12
        assert ((new >= lo) & (new <= hi)).all()


class TestMazeProperties:
    @settings(max_examples=15, deadline=None)
    @given(seeds, st.integers(1, 4))
    def test_dataset_spans(self, seed, span):
        maze = eg.load_maze("medium-coarse")
        ds = eg.generate_stitch_dataset(maze, span, 60, seed, coverage=0.0)
        for t in ds.trajectories:
            assert eg.chebyshev_span(maze, t.states) <= span
            assert eg.replays(maze, t)

    def test_distances_metric(self):
        maze = eg.load_maze("medium")
        d = eg.all_pairs_distances(maze)
        np.testing.assert_array_equal(d, d.T)
        # triangle inequality through every intermediate cell
        assert (d[:, None, :] <= d[:, :, None] + d[None, :, :]).all()

    @FAST
    @given(st.lists(st.tuples(st.integers(1, 12), st.floats(0, 1)), min_size=1, max_size=40))
    def test_bucket_partition(self, rows):
        tasks = [eg.EvalTask(0, 1, d) for d, _ in rows]
        rep = ev.EvalReport(tasks, np.array([r for _, r in rows]), 1, 4)
        rep.bucket_rates, rep.bucket_counts = ev._bucketize(tasks, rep.rates)
        assert sum(rep.bucket_counts.values()) == len(tasks)
        assert ev.generalization_gap(rep, rep) == 0.0

    @FAST
    @given(st.floats(-1, 1))
    def test_gray_round_trip(self, v):
        g = ev.similarity_to_gray(v)
        assert 1 <= g <= 255
        assert abs(ev.gray_to_similarity(g) - v) <= 0.5 / 127 + 1e-12


class TestConfigProperties:
    @FAST
    @given(st.floats(0, 1000), st.sampled_from(tr.METHODS), st.sampled_from(tr.LOSSES), st.booleans(),
           st.floats(0, 0.999), st.integers(0, 2**31), st.lists(st.integers(1, 64), max_size=3))
    def test_round_trip(self, alpha, method, loss, ac, gamma, seed, hidden):
        cfg = tr.TrainConfig(alpha=alpha, method=method, loss_f=loss, action_conditioned=ac, gamma=gamma,
                             seed=seed, actor_hidden=tuple(hidden), bidirectional=method.startswith("byol"))
        assert tr.parse_config(tr.format_config(cfg)) == cfg
