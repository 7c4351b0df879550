"""Rollouts, horizon-bucketed success rates and representation heatmaps."""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nnkit as nk
from .envgen import EvalTask, Maze, diameter, state_features, step
from .trainer import ModelParams, TrainConfig, encode_mean, policy_goal_input, policy_state_input

WALL = np.nan


def policy_table(params: ModelParams, cfg: TrainConfig, maze: Maze) -> np.ndarray:
    """Action probabilities for every (state, goal) pair: shape (n, n, 5)."""
    feats = state_features(maze, cfg.features, cfg.np_dtype)
    zs = policy_state_input(params, feats, cfg)
    zg = policy_goal_input(params, feats, cfg)
    n = maze.n_cells
    h = np.concatenate([np.repeat(zs, n, axis=0), np.tile(zg, (n, 1))], axis=1)
    logits = nk.apply(params.actor_head, params.specs["actor_head"], h).astype(np.float64)
    return nk.softmax(logits).reshape(n, n, -1)


def greedy_table(probs: np.ndarray) -> np.ndarray:
    return probs.argmax(-1)


def bfs_policy_table(maze: Maze) -> np.ndarray:
    """Oracle probabilities: uniform over shortest-path moves (STAY at the goal)."""
    from .envgen import all_pairs_distances

    dist = all_pairs_distances(maze)
    n = maze.n_cells
    probs = np.zeros((n, n, 5))
    for s in range(n):
        for g in range(n):
            if s == g:
                probs[s, g, 4] = 1.0
                continue
            good = [a for a in range(4) if dist[maze.neighbors[s, a], g] == dist[s, g] - 1]
            probs[s, g, good] = 1.0 / len(good)
    return probs


def episode_rng(seed: int, task_index: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_index, episode])


def rollout(maze: Maze, probs: np.ndarray, task: EvalTask, max_steps: int,
            rng: np.random.Generator | None = None, *, stochastic: bool = False):
    """Run one episode from a policy table. Returns ``(success, path)``.

    Greedy argmax by default; ``stochastic`` samples from the table with ``rng``.
    """
    cell = task.start
    path = [cell]
    if cell == task.goal:
        return True, path
    for _ in range(max_steps):
        p = probs[cell, task.goal]
        a = int(rng.choice(len(p), p=p / p.sum())) if stochastic else int(np.argmax(p))
        cell = step(maze, cell, a)
        path.append(cell)
        if cell == task.goal:
            return True, path
    return False, path


def rollout_model(maze: Maze, params: ModelParams, cfg: TrainConfig, task: EvalTask,
                  max_steps: int, rng=None, *, stochastic: bool = False):
    return rollout(maze, policy_table(params, cfg, maze), task, max_steps, rng, stochastic=stochastic)


def _greedy_success(maze: Maze, actions: np.ndarray, starts: np.ndarray, goals: np.ndarray,
                    max_steps: int) -> np.ndarray:
    """Vectorised greedy rollouts for many tasks at once."""
    cells = starts.copy()
    done = cells == goals
    for _ in range(max_steps):
        if done.all():
            break
        a = actions[cells, goals]
        cells = np.where(done, cells, maze.neighbors[cells, a])
        done |= cells == goals
    return done


@dataclass
class EvalReport:
    tasks: list
    successes: np.ndarray  # per task
    episodes: int
    stitch_threshold: int
    seeds: int = 1
    bucket_rates: dict = field(default_factory=dict)
    bucket_counts: dict = field(default_factory=dict)

    @property
    def rates(self) -> np.ndarray:
        return self.successes / self.episodes

    def mean_rate(self, *, max_distance=None, min_distance=None) -> float:
        d = np.array([t.bfs_distance for t in self.tasks])
        mask = np.ones(len(d), dtype=bool)
        if max_distance is not None:
            mask &= d <= max_distance
        if min_distance is not None:
            mask &= d >= min_distance
        if not mask.any():
            raise ValueError("no tasks in the requested distance range")
        return float(self.rates[mask].mean())

    @property
    def in_distribution(self) -> float:
        return self.mean_rate(max_distance=self.stitch_threshold)

    @property
    def out_of_distribution(self) -> float:
        return self.mean_rate(min_distance=self.stitch_threshold + 1)

    @property
    def gap(self) -> float:
        return self.out_of_distribution - self.in_distribution

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "distance", "successes", "episodes", "rate"])
        for i, (t, s) in enumerate(zip(self.tasks, self.successes)):
            w.writerow([i, t.bfs_distance, int(s), self.episodes, repr(float(s) / self.episodes)])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {
            "stitch_threshold": self.stitch_threshold,
            "seeds": self.seeds,
            "n_tasks": len(self.tasks),
            "buckets": {str(k): v for k, v in sorted(self.bucket_rates.items())},
        }
        try:
            out["in_distribution"] = self.in_distribution
            out["out_of_distribution"] = self.out_of_distribution
            out["gap"] = self.gap
        except ValueError:
            pass
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def _bucketize(tasks, rates):
    sums, counts = defaultdict(float), defaultdict(int)
    for t, r in zip(tasks, rates):
        sums[t.bfs_distance] += r
        counts[t.bfs_distance] += 1
    return {k: sums[k] / counts[k] for k in counts}, dict(counts)


def evaluate_table(maze: Maze, probs: np.ndarray, tasks: Sequence[EvalTask], episodes_per_task: int = 1,
                   seeds: Sequence[int] = (0,), stitch_threshold: int = 4, max_steps: int | None = None,
                   stochastic: bool = False) -> EvalReport:
    """Evaluate a policy table on tasks; pure in (probs, tasks, seeds)."""
    if not tasks:
        raise ValueError("evaluate needs at least one task")
    if max_steps is None:
        max_steps = 4 * diameter(maze)
    starts = np.array([t.start for t in tasks])
    goals = np.array([t.goal for t in tasks])
    successes = np.zeros(len(tasks))
    if not stochastic:
        # Greedy policy and deterministic dynamics: every episode is identical.
        ok = _greedy_success(maze, greedy_table(probs), starts, goals, max_steps)
        successes = ok.astype(float) * episodes_per_task * len(seeds)
    else:
        for seed in seeds:
            for ti, t in enumerate(tasks):
                for ep in range(episodes_per_task):
                    ok, _ = rollout(maze, probs, t, max_steps, episode_rng(seed, ti, ep), stochastic=True)
                    successes[ti] += ok
    total = episodes_per_task * len(seeds)
    rep = EvalReport(list(tasks), successes, total, stitch_threshold, len(seeds))
    rep.bucket_rates, rep.bucket_counts = _bucketize(tasks, successes / total)
    return rep


def evaluate(maze: Maze, params: ModelParams, cfg: TrainConfig, tasks: Sequence[EvalTask],
             episodes_per_task: int = 1, seeds: Sequence[int] = (0,), *, stitch_threshold: int = 4,
             max_steps: int | None = None, stochastic: bool = False) -> EvalReport:
    return evaluate_table(maze, policy_table(params, cfg, maze), tasks, episodes_per_task, seeds,
                          stitch_threshold, max_steps, stochastic)


def generalization_gap(report_in: EvalReport, report_out: EvalReport) -> float:
    """Mean OOD success minus mean in-distribution success."""
    if len(report_in.tasks) == 0 or len(report_out.tasks) == 0:
        raise ValueError("both reports need at least one task")
    return float(report_out.rates.mean() - report_in.rates.mean())


def combine_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Pool reports over training seeds on the same task list."""
    first = reports[0]
    succ = sum(r.rates for r in reports) / len(reports)
    rep = EvalReport(first.tasks, succ, 1, first.stitch_threshold, sum(r.seeds for r in reports))
    rep.bucket_rates, rep.bucket_counts = _bucketize(first.tasks, succ)
    return rep


# -- heatmaps -------------------------------------------------------------


@dataclass
class Heatmap:
    values: np.ndarray  # (height, width); NaN on walls
    goal: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        h, wd = self.values.shape
        for y in range(h):
            for x in range(wd):
                v = self.values[y, x]
                if np.isfinite(v):
                    w.writerow([x, y, repr(float(v))])
        return buf.getvalue()

    def to_pgm(self) -> str:
        """Plain PGM: walls 0, similarity in [-1, 1] mapped affinely onto [1, 255]."""
        h, wd = self.values.shape
        lines = ["P2", f"{wd} {h}", "255"]
        for y in range(h):
            row = []
            for x in range(wd):
                v = self.values[y, x]
                row.append("0" if not np.isfinite(v) else str(similarity_to_gray(v)))
            lines.append(" ".join(row))
        return "\n".join(lines) + "\n"


def similarity_to_gray(v: float) -> int:
    return int(round(1 + (np.clip(v, -1.0, 1.0) + 1.0) * 127.0))


def gray_to_similarity(g: int) -> float:
    return (g - 1) / 127.0 - 1.0


def parse_pgm(text: str) -> np.ndarray:
    tokens = text.split()
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)


def prediction_embeddings(params: ModelParams, cfg: TrainConfig, feats: np.ndarray,
                          action: int | None = None) -> np.ndarray:
    """Ensemble-mean psi_f(phi(s)[, a]) for every row of ``feats``."""
    spec = params.specs["forward_predictor"]
    n = feats.shape[0]
    outs = []
    for ep, fp in zip(params.encoders, params.forward_predictors):
        z = nk.apply(ep, params.specs["encoder"], feats)
        if cfg.action_conditioned:
            a = np.zeros((n, 5), dtype=z.dtype)
            a[:, 4 if action is None else action] = 1.0
            z = np.concatenate([z, a], axis=1)
        outs.append(nk.apply(fp, spec, z))
    return sum(outs) / len(outs)


def similarity_heatmap(maze: Maze, params: ModelParams, cfg: TrainConfig, goal: int,
                       action: int | None = None, *, embed: Callable | None = None) -> Heatmap:
    """Cosine similarity between each cell's prediction and phi(goal).

    ``embed`` overrides the (predictions, goal_embedding) pair, which is how
    tests plug in hand-built embeddings.
    """
    feats = state_features(maze, cfg.features, cfg.np_dtype)
    if embed is None:
        preds = prediction_embeddings(params, cfg, feats, action)
        zg = encode_mean(params, feats[goal:goal + 1])[0]
    else:
        preds, zg = embed(feats, goal)
    before = nk.warning_counts["cosine_zero"]
    sims = nk.cosine_similarity(preds.astype(np.float64), np.asarray(zg, dtype=np.float64)[None, :])
    n_zero = nk.warning_counts["cosine_zero"] - before
    if n_zero:
        warnings.warn(f"{n_zero} zero-norm embeddings; similarity set to 0", RuntimeWarning, stacklevel=2)
    grid = np.full((maze.height, maze.width), WALL)
    for i, (x, y) in enumerate(maze.free_cells):
        grid[y, x] = sims[i]
    return Heatmap(grid, goal)
