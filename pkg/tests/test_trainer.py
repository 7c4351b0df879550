import math

import numpy as np
import pytest

from sucrep import envgen as eg
from sucrep import nnkit as nk
from sucrep import trainer as tr
from sucrep.errors import ConfigError
from sucrep.mdp_core import truncated_geometric_pmf

from test_nnkit import rel_err


def corridor_dataset(length=10):
    maze = eg.load_maze("corridor")
    states = tuple(range(length))
    return eg.Dataset((eg.Trajectory(states, (eg.RIGHT,) * (length - 1), 0),), 10, 0, maze.text)


def tiny(method="none", **kw):
    base = dict(steps=0, batch_size=6, encoder_hidden=(4,), predictor_hidden=(4,), actor_hidden=(4,),
                repr_dim=3, dtype="float64", method=method, alpha=1.0 if method != "none" else 0.0,
                tau=0.5)
    if method in ("tra", "fb"):
        base["bidirectional"] = False
    base.update(kw)
    return tr.TrainConfig(**base)


def setup(cfg, dataset, seed=0):
    maze, feats = tr.dataset_features(dataset, cfg)
    rng = np.random.default_rng(seed)
    params = tr.init_params(cfg, feats.shape[1], maze.n_cells, rng)
    b = tr.sample_batch(dataset, 0.9, cfg.batch_size, rng, feats)
    return params, b, feats, rng


def numeric_param_grads(params, loss, h=1e-5):
    out = []
    for t in params.online():
        g = np.zeros_like(t)
        for i in np.ndindex(t.shape):
            old = t[i]
            t[i] = old + h
            fp = loss()
            t[i] = old - h
            fm = loss()
            t[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def randomize(params, rng):
    """Unit-scale random weights keep embedding norms away from zero, where normalized losses are stiff."""
    for t in params.online():
        t[...] = rng.standard_normal(t.shape)


def flat_rel_err(a, b):
    return rel_err(np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b]))


class TestSampleBatch:
    def test_gamma_zero_next_state(self, small_dataset, rng):
        b = tr.sample_batch(small_dataset, 0.0, 500, rng)
        np.testing.assert_array_equal(b.goals, b.next_states)
        np.testing.assert_array_equal(b.offsets, 1)

    def test_length_two(self, rng):
        maze = eg.load_maze("corridor")
        trajs = tuple(eg.Trajectory((i, i + 1), (eg.RIGHT,), 0) for i in range(5))
        ds = eg.Dataset(trajs, 1, 0, maze.text)
        b = tr.sample_batch(ds, 0.99, 1000, rng)
        np.testing.assert_array_equal(b.offsets, 1)

    def test_offset_distribution(self, rng):
        ds = corridor_dataset(10)
        T = 9
        expected = np.zeros(T)
        for t in range(T):
            expected[: T - t] += truncated_geometric_pmf(0.9, T - t) / T
        b = tr.sample_batch(ds, 0.9, 100_000, rng)
        emp = np.bincount(b.offsets - 1, minlength=T) / 100_000
        assert 0.5 * np.abs(emp - expected).sum() <= 0.02

    def test_same_trajectory(self, small_dataset, rng):
        b = tr.sample_batch(small_dataset, 0.9, 300, rng)
        for i in range(300):
            traj = small_dataset.trajectories[b.traj_index[i]]
            t, k = b.time_index[i], b.offsets[i]
            assert traj.states[t] == b.states[i]
            assert traj.states[t + k] == b.goals[i]
            assert traj.actions[t] == b.actions[i]

    def test_empty(self, rng):
        ds = eg.Dataset((), 1, 0, eg.load_maze("corridor").text)
        with pytest.raises(ValueError):
            tr.sample_batch(ds, 0.9, 4, rng)


class TestBcLoss:
    def test_uniform_actor(self, small_dataset):
        cfg = tiny()
        params, b, _, _ = setup(cfg, small_dataset)
        params.actor_head = [np.zeros_like(t) for t in params.actor_head]
        res = tr.compute_losses(params, cfg, b, with_grads=False)
        assert res.bc_loss == pytest.approx(math.log(5), rel=1e-12)

    def test_oracle_actor(self, small_dataset):
        cfg = tiny()
        params, b, _, _ = setup(cfg, small_dataset)
        # final bias dominates everything; batch labels all set to the boosted action
        params.actor_head = [np.zeros_like(t) for t in params.actor_head]
        params.actor_head[-1][2] = 50.0
        b.actions[:] = 2
        assert tr.compute_losses(params, cfg, b, with_grads=False).bc_loss <= 1e-6

    def test_enumeration(self, small_dataset):
        cfg = tiny()
        params, b, _, _ = setup(cfg, small_dataset)
        logits = tr.policy_logits(params, cfg, b.state_feats, b.goal_feats)
        nll = []
        for row, a in zip(logits, b.actions):
            nll.append(math.log(sum(math.exp(v) for v in row)) - row[a])
        res = tr.compute_losses(params, cfg, b, with_grads=False)
        assert res.bc_loss == pytest.approx(np.mean(nll), rel=1e-12)

    def test_goal_embedding_is_ensemble_mean(self, small_dataset):
        cfg = tiny()
        params, b, _, _ = setup(cfg, small_dataset)
        members = [nk.apply(p, params.specs["encoder"], b.goal_feats) for p in params.encoders]
        np.testing.assert_allclose(tr.policy_goal_input(params, b.goal_feats, cfg), sum(members) / 2)

    def test_identical_members_idempotent(self, small_dataset):
        cfg = tiny()
        params, b, _, _ = setup(cfg, small_dataset)
        params.encoders[1] = [t.copy() for t in params.encoders[0]]
        single = nk.apply(params.encoders[0], params.specs["encoder"], b.goal_feats)
        np.testing.assert_allclose(tr.policy_goal_input(params, b.goal_feats, cfg), single, rtol=1e-14)


GRAD_CASES = [
    ("none", {}),
    ("byol", {}),
    ("byol_gamma", {}),
    ("byol_gamma", {"loss_f": "l2"}),
    ("byol_gamma", {"action_conditioned": False, "bidirectional": False}),
    ("tra", {}),
    ("tra", {"action_conditioned": False}),
    ("fb", {}),
]


class TestGradients:
    @pytest.mark.parametrize("method,extra", GRAD_CASES)
    def test_finite_differences(self, small_dataset, method, extra):
        cfg = tiny(method, **extra)
        params, b, feats, rng = setup(cfg, small_dataset, seed=3)
        randomize(params, rng)
        perm = rng.permutation(cfg.batch_size)
        res = tr.compute_losses(params, cfg, b, perm=perm)
        loss = lambda: tr.compute_losses(params, cfg, b, perm=perm, with_grads=False).total_loss
        assert flat_rel_err(res.grads, numeric_param_grads(params, loss)) <= 1e-4

    def test_stop_gradient_probe(self, small_dataset):
        cfg = tiny("byol_gamma")
        params, b, _, _ = setup(cfg, small_dataset)
        res = tr.compute_losses(params, cfg, b)
        # gradients cover exactly the online tensors; the EMA copy has none
        assert len(res.grads) == len(params.online())
        ema_ids = {id(t) for e in params.ema_targets for t in e.params}
        assert not ema_ids & {id(t) for t in params.online()}
        # the target does enter the loss value
        before = res.aux_loss
        params.ema_targets[0].params[0] += 1.0
        assert tr.compute_losses(params, cfg, b, with_grads=False).aux_loss != before

    def test_ensemble_independence(self, small_dataset):
        cfg = tiny("byol_gamma")
        params, b, _, rng = setup(cfg, small_dataset)
        g0 = tr.compute_losses(params, cfg, b, include_bc=False).grads
        n_enc = len(params.encoders[0])
        for t in params.encoders[1]:
            t += rng.standard_normal(t.shape)
        g1 = tr.compute_losses(params, cfg, b, include_bc=False).grads
        for a, c in zip(g0[:n_enc], g1[:n_enc]):
            np.testing.assert_array_equal(a, c)
        assert any(not np.array_equal(a, c) for a, c in zip(g0[n_enc:2 * n_enc], g1[n_enc:2 * n_enc]))


class TestAuxValues:
    def test_l2_exact_prediction_is_zero(self, small_dataset):
        cfg = tiny("byol", loss_f="l2", tau=1.0)
        params, b, _, _ = setup(cfg, small_dataset)
        # all-zero encoders and predictors: prediction and target are both the zero vector
        for p in params.encoders + params.forward_predictors:
            for t in p:
                t[...] = 0.0
        assert tr.compute_losses(params, cfg, b, with_grads=False).aux_loss == 0.0

    def test_gamma_zero_reduction_bitwise(self, small_dataset):
        common = dict(action_conditioned=False, bidirectional=False, tau=1.0)
        g_cfg = tiny("byol_gamma", gamma=0.0, **common)
        b_cfg = tiny("byol", **common)
        params, b, _, _ = setup(g_cfg, small_dataset)
        rg = tr.compute_losses(params, g_cfg, b, aux_plus_feats=b.next_feats)
        rb = tr.compute_losses(params, b_cfg, b)
        assert rg.aux_loss == rb.aux_loss
        for x, y in zip(rg.grads, rb.grads):
            np.testing.assert_array_equal(x, y)

    def test_tra_equal_reps(self, small_dataset):
        cfg = tiny("tra", action_conditioned=False)
        params, b, _, _ = setup(cfg, small_dataset)
        for p in params.encoders + params.forward_predictors:
            for t in p:
                t[...] = 0.0
            p[-1][:] = 1.0  # constant output 1 in every coordinate
        d = 3
        val = tr.compute_losses(params, cfg, b, with_grads=False).aux_loss
        reg = tr.TRA_LAMBDA * 2 * d / d
        # two members, each 2 * (mean of row/column terms) + regularizer
        assert val == pytest.approx(2 * (2 * math.log(cfg.batch_size) + reg), rel=1e-12)

    def test_fb_zero_reps(self, small_dataset):
        cfg = tiny("fb")
        params, b, _, rng = setup(cfg, small_dataset)
        tensors = params.encoders + params.forward_predictors
        tensors += [e.params for e in params.ema_targets + params.predictor_targets]
        for p in tensors:
            for t in p:
                t[...] = 0.0
        res = tr.compute_losses(params, cfg, b, perm=rng.permutation(cfg.batch_size), with_grads=False)
        assert res.aux_loss == 0.0

    def test_fb_gamma_zero_drops_bootstrap(self, small_dataset):
        cfg = tiny("fb", gamma=0.0)
        params, b, _, rng = setup(cfg, small_dataset)
        perm = rng.permutation(cfg.batch_size)
        v0 = tr.compute_losses(params, cfg, b, perm=perm, with_grads=False).aux_loss
        for e in params.ema_targets + params.predictor_targets:
            for t in e.params:
                t += 1.0
        assert tr.compute_losses(params, cfg, b, perm=perm, with_grads=False).aux_loss == v0


class TestConfig:
    def test_round_trip(self):
        cfg = tr.TrainConfig(alpha=40.0, method="byol_gamma", actor_hidden=(32, 16), action_conditioned=False)
        assert tr.parse_config(tr.format_config(cfg)) == cfg

    def test_comments_and_blanks(self):
        cfg = tr.parse_config("# c\n\nalpha = 6  # weight\nmethod=byol_gamma\n")
        assert cfg.alpha == 6.0 and cfg.method == "byol_gamma"

    @pytest.mark.parametrize("text", ["nope = 1", "alpha", "alpha = x", "bidirectional = maybe",
                                      "gamma = 1.0", "alpha = -1", "ensemble_size = 0", "method = sac",
                                      "method = fb\nalpha = 1\nbidirectional = true"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            tr.parse_config(text)


class TestTrain:
    def test_alpha_zero_matches_none(self, small_dataset, tiny_cfg):
        a, ma = tr.train(small_dataset, tiny_cfg)
        for method in ("byol_gamma", "fb", "tra"):
            extra = {"bidirectional": False} if method in ("fb", "tra") else {}
            b, mb = tr.train(small_dataset, tiny_cfg.replace(method=method, alpha=0.0, gamma=0.5, **extra))
            for x, y in zip(a.actor_head, b.actor_head):
                np.testing.assert_array_equal(x, y)
            assert [r["bc_loss"] for r in ma] == [r["bc_loss"] for r in mb]

    def test_deterministic(self, small_dataset, tiny_cfg):
        cfg = tiny_cfg.replace(method="byol_gamma", alpha=6.0)
        a, ma = tr.train(small_dataset, cfg)
        b, mb = tr.train(small_dataset, cfg)
        assert ma == mb
        for x, y in zip(a.online(), b.online()):
            np.testing.assert_array_equal(x, y)

    def test_metrics_schedule(self, small_dataset, tiny_cfg):
        rows = []
        _, metrics = tr.train(small_dataset, tiny_cfg, on_record=rows.append)
        assert [r["step"] for r in metrics] == [0, 5, 10, 15, 20]
        assert rows == metrics
        assert set(metrics[0]) == set(tr.METRIC_COLUMNS)
        assert all(r["wall_ms"] == 0.0 for r in metrics)

    def test_ema_follows(self, small_dataset, tiny_cfg):
        cfg = tiny_cfg.replace(method="byol_gamma", alpha=1.0, tau=0.5, steps=3)
        params, _ = tr.train(small_dataset, cfg)
        diff = [np.abs(e - o).max() for e, o in zip(params.ema_targets[0].params, params.encoders[0])]
        assert max(diff) > 0

    def test_smoke_bc_halves(self):
        maze = eg.load_maze("medium")
        ds = eg.generate_stitch_dataset(maze, 4, 300, 0)
        cfg = tr.TrainConfig(steps=800, record_every=100)
        _, metrics = tr.train(ds, cfg)
        assert metrics[-1]["bc_loss"] <= 0.5 * metrics[0]["bc_loss"]
