"""Exact finite-MDP quantities: policy transitions, successor matrices, occupancies.

All arithmetic is float64. The successor representation counts visits from
``s_{t+1}``::

    M = sum_{t>=0} gamma^t P^{t+1} = P (I - gamma P)^{-1}

and its normalized form ``(1 - gamma) M`` is row-stochastic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericError, StateError

ROW_TOL = 1e-12


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 <= gamma < 1.0:
        raise DomainError(f"gamma must be < 1 and >= 0, got {gamma}")
    return gamma


@dataclass(frozen=True)
class FiniteMdp:
    transitions: np.ndarray  # P[s, a, s']
    initial_dist: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=np.float64)
        p0 = np.asarray(self.initial_dist, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise DimensionError(f"transitions must have shape (S, A, S), got {P.shape}")
        if p0.shape != (P.shape[0],):
            raise DimensionError(f"initial_dist must have shape ({P.shape[0]},), got {p0.shape}")
        if (P < 0).any() or np.abs(P.sum(-1) - 1.0).max() > ROW_TOL:
            raise DomainError("every P[s, a, :] must be a probability vector")
        if (p0 < 0).any() or abs(p0.sum() - 1.0) > ROW_TOL:
            raise DomainError("initial_dist must be a probability vector")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "initial_dist", p0)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @classmethod
    def from_markov_chain(cls, p: np.ndarray, p0: np.ndarray | None = None) -> "FiniteMdp":
        """Single-action MDP whose only action follows the chain ``p``."""
        p = np.asarray(p, dtype=np.float64)
        n = p.shape[0]
        if p0 is None:
            p0 = np.full(n, 1.0 / n)
        return cls(p[:, None, :], p0)


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        pi = np.asarray(self.probs, dtype=np.float64)
        if pi.ndim != 2:
            raise DimensionError(f"policy must be a matrix, got shape {pi.shape}")
        if (pi < 0).any() or np.abs(pi.sum(1) - 1.0).max() > ROW_TOL:
            raise DomainError("each policy row must be a probability vector")
        object.__setattr__(self, "probs", pi)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        pi = np.zeros((len(actions), n_actions))
        pi[np.arange(len(actions)), actions] = 1.0
        return cls(pi)


@dataclass(frozen=True)
class SuccessorMatrix:
    m: np.ndarray
    gamma: float
    normalized: bool = False


@dataclass(frozen=True)
class OccupancyVector:
    d: np.ndarray
    gamma: float
    normalized: bool = field(default=True)


def policy_transition(mdp: FiniteMdp, policy: TabularPolicy) -> np.ndarray:
    """P^pi[i, j] = sum_a pi[i, a] P[i, a, j]."""
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )
    return np.einsum("ia,iaj->ij", policy.probs, mdp.transitions)


def successor_representation(p_pi: np.ndarray, gamma: float) -> SuccessorMatrix:
    """Solve ``(I - gamma P) M = P`` for the unnormalized SR."""
    gamma = _check_gamma(gamma)
    p_pi = np.asarray(p_pi, dtype=np.float64)
    if p_pi.ndim != 2 or p_pi.shape[0] != p_pi.shape[1]:
        raise DimensionError(f"p_pi must be square, got {p_pi.shape}")
    n = p_pi.shape[0]
    # P and (I - gamma P)^{-1} commute, so the left solve gives P (I - gamma P)^{-1}.
    try:
        m = np.linalg.solve(np.eye(n) - gamma * p_pi, p_pi)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular system in SR solve: {exc}") from exc
    if not np.isfinite(m).all():
        raise NumericError("non-finite successor representation")
    return SuccessorMatrix(m, gamma, normalized=False)


def normalize_sm(sm: SuccessorMatrix) -> SuccessorMatrix:
    if sm.normalized:
        raise StateError("successor matrix is already normalized")
    return SuccessorMatrix((1.0 - sm.gamma) * sm.m, sm.gamma, normalized=True)


def normalized_sr(p_pi: np.ndarray, gamma: float) -> np.ndarray:
    """Shortcut for the row-stochastic matrix (1 - gamma) M."""
    return normalize_sm(successor_representation(p_pi, gamma)).m


def bellman_residual(sm: SuccessorMatrix, p_pi: np.ndarray) -> float:
    """Max-norm of M - P - gamma P M (unnormalized M)."""
    m = sm.m / (1.0 - sm.gamma) if sm.normalized else sm.m
    return float(np.abs(m - p_pi - sm.gamma * p_pi @ m).max())


def successor_features(sm: SuccessorMatrix, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.shape[0] != sm.m.shape[1]:
        raise DimensionError(f"phi has {phi.shape[0]} rows, SR has {sm.m.shape[1]} columns")
    return sm.m @ phi


def discounted_occupancy(
    p_pi: np.ndarray, p0: np.ndarray, gamma: float, *, from_start: bool = False
) -> OccupancyVector:
    """Normalized discounted state occupancy from ``p0``.

    By default visits are counted from ``s_1`` (same convention as the SR), so
    the result is ``p0^T (1 - gamma) M``. With ``from_start=True`` the visit
    at ``s_0`` is included: ``(1 - gamma) p0 + gamma * p0^T (1 - gamma) M``.
    The latter is the occupancy under which the mixture-policy identity holds
    exactly.
    """
    gamma = _check_gamma(gamma)
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.shape != (np.shape(p_pi)[0],):
        raise DimensionError("p0 does not match p_pi")
    d = p0 @ normalized_sr(p_pi, gamma)
    if from_start:
        d = (1.0 - gamma) * p0 + gamma * d
    d = np.clip(d, 0.0, None)
    return OccupancyVector(d / d.sum(), gamma)


def mixture_policy(
    policies: Sequence[TabularPolicy],
    weights: Sequence[float],
    occupancies: Sequence[OccupancyVector],
) -> TabularPolicy:
    """Markovian policy whose action choice mixes members by posterior p(beta_j | s).

    The posterior is proportional to ``weights[j] * occupancies[j].d[s]``;
    states that no member visits fall back to uniform actions.
    """
    if not policies:
        raise ValueError("mixture_policy needs at least one policy")
    if not (len(policies) == len(weights) == len(occupancies)):
        raise DimensionError("policies, weights and occupancies differ in length")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise DomainError("mixture weights must form a probability vector")
    probs = np.stack([p.probs for p in policies])  # (J, S, A)
    occ = np.stack([o.d for o in occupancies])  # (J, S)
    coef = w[:, None] * occ
    total = coef.sum(0)
    mixed = np.einsum("js,jsa->sa", coef, probs)
    n_actions = probs.shape[2]
    out = np.full_like(mixed, 1.0 / n_actions)
    seen = total > 0
    out[seen] = mixed[seen] / total[seen, None]
    return TabularPolicy(out / out.sum(1, keepdims=True))


def mixing_coefficients(weights: Sequence[float], occupancy_at_s: Sequence[float]) -> np.ndarray:
    """p(beta_j | s) for one state, given member weights and member occupancies at s."""
    c = np.asarray(weights, dtype=np.float64) * np.asarray(occupancy_at_s, dtype=np.float64)
    return c / c.sum()


# -- geometric offsets ----------------------------------------------------


def truncated_geometric_pmf(gamma: float, max_offset: int) -> np.ndarray:
    """pmf over k = 1..max_offset proportional to (1 - gamma) gamma^(k-1)."""
    gamma = _check_gamma(gamma)
    if max_offset < 1:
        raise DomainError("max_offset must be >= 1")
    k = np.arange(max_offset)
    pmf = (1.0 - gamma) * gamma**k
    return pmf / pmf.sum()


def geometric_offsets(gamma: float, max_offsets, rng: np.random.Generator) -> np.ndarray:
    """Vectorised truncated-geometric draws, one per entry of ``max_offsets``.

    Inverse-CDF sampling on {1, ..., K}: with ``u ~ U[0, 1)``,
    ``k = 1 + floor(log(1 - u (1 - gamma^K)) / log gamma)``.
    """
    gamma = _check_gamma(gamma)
    kmax = np.asarray(max_offsets, dtype=np.int64)
    if (kmax < 1).any():
        raise DomainError("max_offset must be >= 1")
    if gamma == 0.0:
        return np.ones(kmax.shape, dtype=np.int64)
    u = rng.random(kmax.shape)
    tail = np.exp(kmax.astype(np.float64) * np.log(gamma))  # gamma^K, underflows to 0 safely
    k = 1 + np.floor(np.log1p(-u * (1.0 - tail)) / np.log(gamma)).astype(np.int64)
    return np.clip(k, 1, kmax)


def geometric_sample(gamma: float, max_offset: int, rng: np.random.Generator) -> int:
    if max_offset < 1:
        raise DomainError("max_offset must be >= 1")
    return int(geometric_offsets(gamma, np.array([max_offset]), rng)[0])


# -- built-in chains and random instances --------------------------------


def ring_walk(n: int, lazy: float = 0.0) -> np.ndarray:
    """Symmetric random walk on a cycle; ``lazy`` is the self-loop probability."""
    p = np.zeros((n, n))
    idx = np.arange(n)
    step = (1.0 - lazy) / 2.0
    p[idx, (idx + 1) % n] += step
    p[idx, (idx - 1) % n] += step
    p[idx, idx] += lazy
    return p


def grid_walk(width: int, height: int) -> np.ndarray:
    """Symmetric walk on a grid: each of the 4 moves has prob 1/4, blocked moves stay."""
    n = width * height
    p = np.zeros((n, n))
    for y in range(height):
        for x in range(width):
            i = y * width + x
            for dx, dy in ((0, -1), (0, 1), (-1, 0), (1, 0)):
                nx, ny = x + dx, y + dy
                j = ny * width + nx if 0 <= nx < width and 0 <= ny < height else i
                p[i, j] += 0.25
    return p


def complete_walk(n: int) -> np.ndarray:
    """Uniform jump to any other state."""
    p = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(p, 0.0)
    return p


BUILTIN_CHAINS = {
    "ring": lambda n: ring_walk(n, 0.5),
    "grid": lambda n: grid_walk(*_square_dims(n)),
    "complete": lambda n: complete_walk(n),
}


def _square_dims(n: int) -> tuple[int, int]:
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise DomainError(f"grid chain needs a square state count, got {n}")
    return side, side


def random_stochastic(n_rows: int, n_cols: int, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(n_cols, concentration), size=n_rows)


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator) -> FiniteMdp:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    p0 = rng.dirichlet(np.ones(n_states))
    return FiniteMdp(P, p0)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


# -- text format ----------------------------------------------------------


def parse_mdp_text(text: str) -> tuple[FiniteMdp, TabularPolicy, float | None]:
    """Parse the plain-text MDP format (see README, "MDP files").

    Returns the MDP, the policy (uniform if no ``policy`` block) and the
    optional ``gamma`` from the header.
    """
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    header: dict[str, str] = {}
    i = 0
    while i < len(lines) and lines[i].split()[0] in ("n_states", "n_actions", "gamma"):
        parts = lines[i].split()
        if len(parts) != 2:
            raise ValueError(f"bad header line: {lines[i]!r}")
        header[parts[0]] = parts[1]
        i += 1
    try:
        n = int(header["n_states"])
        a = int(header["n_actions"])
    except KeyError as exc:
        raise ValueError(f"missing header field {exc}") from None
    gamma = float(header["gamma"]) if "gamma" in header else None

    blocks: dict[str, list[list[float]]] = {}
    current = None
    for line in lines[i:]:
        word = line.split()[0]
        if word in ("P", "policy", "p0"):
            current = word
            blocks[current] = []
            continue
        if current is None:
            raise ValueError(f"data before any block: {line!r}")
        blocks[current].append([float(v) for v in line.split()])

    if "P" not in blocks:
        raise ValueError("missing P block")
    P = np.array(blocks["P"], dtype=np.float64)
    if P.shape != (n * a, n):
        raise DimensionError(f"P block must have {n * a} rows of {n} values")
    P = P.reshape(n, a, n)
    p0 = np.array(blocks["p0"][0]) if "p0" in blocks else np.full(n, 1.0 / n)
    pi = np.array(blocks["policy"]) if "policy" in blocks else np.full((n, a), 1.0 / a)
    return FiniteMdp(P, p0), TabularPolicy(pi), gamma


def format_mdp_text(mdp: FiniteMdp, policy: TabularPolicy | None = None, gamma: float | None = None) -> str:
    out = [f"n_states {mdp.n_states}", f"n_actions {mdp.n_actions}"]
    if gamma is not None:
        out.append(f"gamma {gamma!r}")
    out.append("P")
    for row in mdp.transitions.reshape(-1, mdp.n_states):
        out.append(" ".join(repr(float(v)) for v in row))
    out.append("p0")
    out.append(" ".join(repr(float(v)) for v in mdp.initial_dist))
    if policy is not None:
        out.append("policy")
        for row in policy.probs:
            out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"
