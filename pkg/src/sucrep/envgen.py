"""Gridworld mazes, stitch-style datasets and evaluation tasks.

Mazes are ASCII maps ('#' wall, '.' free). Free cells are indexed in
row-major order; coordinates are ``(x, y)`` with ``y`` the row.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, GenerationError

UP, DOWN, LEFT, RIGHT, STAY = range(5)
N_ACTIONS = 5
ACTION_NAMES = ("up", "down", "left", "right", "stay")
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
UNREACHABLE = -1

# Medium layout used by the point-maze family, with every maze cell upscaled
# to a 2x2 block of grid cells.
MEDIUM_LAYOUT = """\
########
#..##..#
#..#...#
##...###
#..#...#
#.#..#.#
#...#..#
########"""

LARGE_LAYOUT = """\
############
#....#.....#
#.##.#.#.#.#
#......#...#
#.####.###.#
#.#....#...#
#.#.##.#.###
#.#..#.....#
############"""


def upscale(text: str, factor: int) -> str:
    """Blow every glyph up into a factor x factor block."""
    rows = text.strip("\n").splitlines()
    out = []
    for row in rows:
        wide = "".join(ch * factor for ch in row)
        out.extend([wide] * factor)
    return "\n".join(out)


BUILTIN_MAZES = {
    "medium": upscale(MEDIUM_LAYOUT, 2),
    "medium-coarse": MEDIUM_LAYOUT,
    "large": upscale(LARGE_LAYOUT, 2),
    "corridor": "#" * 12 + "\n#" + "." * 10 + "#\n" + "#" * 12,
}


@dataclass(frozen=True)
class Maze:
    text: str
    width: int
    height: int
    walls: np.ndarray  # bool (height, width)
    free_cells: tuple  # index -> (x, y)
    neighbors: np.ndarray  # (n, 5) destination of each action
    index_of: dict = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.free_cells)

    def coords(self) -> np.ndarray:
        return np.array(self.free_cells, dtype=np.int64)

    def cell_at(self, x: int, y: int) -> int:
        try:
            return self.index_of[(x, y)]
        except KeyError:
            raise ValueError(f"({x}, {y}) is not a free cell") from None


def parse_maze(text: str) -> Maze:
    rows = [r for r in text.strip("\n").splitlines()]
    if not rows or not rows[0]:
        raise ValueError("empty maze")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("maze rows have different lengths")
    bad = set("".join(rows)) - {"#", "."}
    if bad:
        raise ValueError(f"unexpected glyphs in maze: {sorted(bad)}")
    walls = np.array([[ch == "#" for ch in r] for r in rows])
    height = len(rows)
    free = tuple((x, y) for y in range(height) for x in range(width) if not walls[y, x])
    if not free:
        raise ValueError("maze has no free cells")
    index_of = {c: i for i, c in enumerate(free)}
    nbr = np.empty((len(free), N_ACTIONS), dtype=np.int64)
    for i, (x, y) in enumerate(free):
        for a, (dx, dy) in enumerate(MOVES):
            nbr[i, a] = index_of.get((x + dx, y + dy), i)
    maze = Maze("\n".join(rows), width, height, walls, free, nbr, index_of)
    if (bfs_distances(maze, 0) == UNREACHABLE).any():
        raise ValueError("free space is not connected")
    return maze


def load_maze(name_or_text: str) -> Maze:
    return parse_maze(BUILTIN_MAZES.get(name_or_text, name_or_text))


def step(maze: Maze, cell: int, action: int) -> int:
    return int(maze.neighbors[cell, action])


def bfs_distances(maze: Maze, source: int) -> np.ndarray:
    if not 0 <= source < maze.n_cells:
        raise ValueError(f"source {source} is not a free cell")
    dist = np.full(maze.n_cells, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        c = queue.popleft()
        for nxt in maze.neighbors[c, :4]:
            if dist[nxt] == UNREACHABLE:
                dist[nxt] = dist[c] + 1
                queue.append(nxt)
    return dist


def all_pairs_distances(maze: Maze) -> np.ndarray:
    return np.stack([bfs_distances(maze, s) for s in range(maze.n_cells)])


def diameter(maze: Maze) -> int:
    return int(all_pairs_distances(maze).max())


def shortest_path(maze: Maze, start: int, goal: int, rng: np.random.Generator,
                  dist_to_goal: np.ndarray | None = None) -> tuple[list[int], list[int]]:
    """One shortest path, breaking ties uniformly at each step.

    Returns ``(states, actions)`` with ``len(actions) == len(states) - 1``.
    """
    if dist_to_goal is None:
        dist_to_goal = bfs_distances(maze, goal)
    if dist_to_goal[start] == UNREACHABLE:
        raise ValueError(f"goal {goal} unreachable from {start}")
    states, actions = [start], []
    cell = start
    while cell != goal:
        want = dist_to_goal[cell] - 1
        options = [a for a in range(4) if dist_to_goal[maze.neighbors[cell, a]] == want]
        a = options[int(rng.integers(len(options)))]
        cell = int(maze.neighbors[cell, a])
        states.append(cell)
        actions.append(a)
    return states, actions


# -- datasets -------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple
    policy_id: int

    def __post_init__(self):
        if len(self.actions) != len(self.states) - 1:
            raise DimensionError("a trajectory needs exactly one action per transition")


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple
    span_limit: int
    seed: int
    maze_name: str  # the ASCII map itself, so the file is self-contained

    def __len__(self):
        return len(self.trajectories)


def chebyshev_span(maze: Maze, states: Sequence[int]) -> int:
    xy = maze.coords()[np.asarray(states)]
    return int((xy.max(0) - xy.min(0)).max())


def replays(maze: Maze, traj: Trajectory) -> bool:
    return all(
        step(maze, s, a) == s_next
        for s, a, s_next in zip(traj.states[:-1], traj.actions, traj.states[1:])
    )


def generate_stitch_dataset(
    maze: Maze,
    span_limit: int,
    n_trajectories: int,
    rng: np.random.Generator | int,
    *,
    coverage: float = 0.95,
    max_retries: int = 20,
    seed: int | None = None,
) -> Dataset:
    """Short shortest-path trajectories whose Chebyshev span never exceeds ``span_limit``.

    Each trajectory picks a uniform start, a uniform target within the span
    window of the start, and follows a random-tie-break shortest path. Paths
    that leave the window are redrawn. The whole set is regenerated when the
    union of visited cells covers less than ``coverage`` of the maze.
    """
    if span_limit < 1:
        raise ValueError("span_limit must be >= 1")
    if isinstance(rng, (int, np.integer)):
        seed = int(rng) if seed is None else seed
        rng = np.random.default_rng(int(rng))
    seed = -1 if seed is None else seed
    coords = maze.coords()
    dists = all_pairs_distances(maze)
    cheb = np.abs(coords[:, None, :] - coords[None, :, :]).max(-1)
    window = [np.flatnonzero((cheb[s] <= span_limit) & (np.arange(maze.n_cells) != s))
              for s in range(maze.n_cells)]
    if all(len(w) == 0 for w in window):
        raise GenerationError("maze has a single cell; nothing to traverse")

    for _ in range(max_retries):
        trajs = []
        visited = np.zeros(maze.n_cells, dtype=bool)
        while len(trajs) < n_trajectories:
            start = int(rng.integers(maze.n_cells))
            if len(window[start]) == 0:
                continue
            target = int(window[start][rng.integers(len(window[start]))])
            for _attempt in range(8):
                states, actions = shortest_path(maze, start, target, rng, dists[target])
                if chebyshev_span(maze, states) <= span_limit:
                    break
            else:
                continue
            trajs.append(Trajectory(tuple(states), tuple(actions), start * maze.n_cells + target))
            visited[states] = True
        if visited.mean() >= coverage:
            return Dataset(tuple(trajs), span_limit, seed, maze.text)
    raise GenerationError(
        f"could not reach {coverage:.0%} cell coverage with {n_trajectories} trajectories "
        f"after {max_retries} attempts"
    )


def dataset_to_jsonl(ds: Dataset) -> str:
    lines = [json.dumps({"maze": ds.maze_name, "span_limit": ds.span_limit, "seed": ds.seed})]
    for t in ds.trajectories:
        lines.append(json.dumps({"policy_id": t.policy_id, "states": list(t.states),
                                 "actions": list(t.actions)}))
    return "\n".join(lines) + "\n"


def dataset_from_jsonl(text: str) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty dataset file")
    head = json.loads(lines[0])
    trajs = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        trajs.append(Trajectory(tuple(rec["states"]), tuple(rec["actions"]), int(rec["policy_id"])))
    return Dataset(tuple(trajs), int(head["span_limit"]), int(head["seed"]), head["maze"])


def coverage_of(ds: Dataset, n_cells: int) -> float:
    seen = np.zeros(n_cells, dtype=bool)
    for t in ds.trajectories:
        seen[list(t.states)] = True
    return float(seen.mean())


# -- featurization --------------------------------------------------------


def state_features(maze: Maze, mode: str = "onehot", dtype=np.float64) -> np.ndarray:
    """Feature table indexed by cell: one-hot over free cells or normalized (x, y)."""
    if mode == "onehot":
        return np.eye(maze.n_cells, dtype=dtype)
    if mode == "xy":
        xy = maze.coords().astype(dtype)
        scale = np.array([max(maze.width - 1, 1), max(maze.height - 1, 1)], dtype=dtype)
        return xy / scale
    raise ValueError(f"unknown featurization {mode!r}")


# -- evaluation tasks -----------------------------------------------------


@dataclass(frozen=True)
class EvalTask:
    start: int
    goal: int
    bfs_distance: int


def make_task(maze: Maze, start: int, goal: int) -> EvalTask:
    d = int(bfs_distances(maze, start)[goal])
    if d == UNREACHABLE:
        raise ValueError(f"goal {goal} unreachable from {start}")
    return EvalTask(start, goal, d)


def make_horizon_tasks(maze: Maze, base_tasks: Iterable[EvalTask], rng: np.random.Generator) -> list[EvalTask]:
    """Expand each base task into one task per waypoint on a shortest path."""
    out = []
    for task in base_tasks:
        dist_to_goal = bfs_distances(maze, task.goal)
        if dist_to_goal[task.start] == UNREACHABLE:
            raise ValueError(f"base task {task} is unsolvable")
        states, _ = shortest_path(maze, task.start, task.goal, rng, dist_to_goal)
        out.extend(EvalTask(task.start, w, i) for i, w in enumerate(states[1:], start=1))
    return out


def default_base_tasks(maze: Maze, n_tasks: int = 5) -> list[EvalTask]:
    """Deterministic spread-out tasks: greedy farthest-pair selection."""
    dists = all_pairs_distances(maze)
    tasks = []
    used = set()
    order = np.argsort(-dists, axis=None, kind="stable")
    for flat in order:
        s, g = divmod(int(flat), maze.n_cells)
        if s in used or g in used:
            continue
        tasks.append(EvalTask(s, g, int(dists[s, g])))
        used.update((s, g))
        if len(tasks) == n_tasks:
            break
    return tasks


def all_pair_tasks(maze: Maze) -> list[EvalTask]:
    dists = all_pairs_distances(maze)
    n = maze.n_cells
    return [EvalTask(s, g, int(dists[s, g])) for s in range(n) for g in range(n) if s != g]
