"""Linear representation objectives on exact tabular MDPs.

Covers the idealised BYOL-gamma flow (exact predictor before every encoder
step, Stiefel retraction), the FB TD loss and its n-step variant, InfoNCE
and a free-critic InfoNCE fit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError, DomainError, NumericError, PreconditionError
from .mdp_core import FiniteMdp, TabularPolicy, normalized_sr, policy_transition, successor_representation
from .nnkit import AdamState, adam_step, infonce_grad, infonce_loss  # noqa: F401  (re-exported)

ORTHO_TOL = 1e-8


@dataclass
class LinearRepr:
    phi: np.ndarray  # (n, d)
    psi: np.ndarray  # (d, d)

    @property
    def orthonormal(self) -> bool:
        return ortho_defect(self.phi) <= ORTHO_TOL


@dataclass(frozen=True)
class OdeConfig:
    step_size: float = 0.01
    n_steps: int = 2000
    retraction: str = "qr"
    record_every: int = 1

    def __post_init__(self):
        if not 0.0 < self.step_size <= 0.5:
            raise DomainError("step_size must lie in (0, 0.5]")
        if self.retraction not in ("qr", "none"):
            raise DomainError("retraction must be 'qr' or 'none'")
        if self.n_steps < 0 or self.record_every < 1:
            raise DomainError("n_steps >= 0 and record_every >= 1 required")


@dataclass
class OdeTrace:
    steps: list = field(default_factory=list)
    surrogate_values: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    ortho_defects: list = field(default_factory=list)
    final: LinearRepr | None = None
    target: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "surrogate_error", "grad_norm", "ortho_defect"])
        for row in zip(self.steps, self.surrogate_values, self.grad_norms, self.ortho_defects):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def ortho_defect(phi: np.ndarray) -> float:
    d = phi.shape[1]
    return float(np.abs(phi.T @ phi - np.eye(d)).max())


def qr_retract(phi: np.ndarray) -> np.ndarray:
    """Orthonormalise columns, sign-fixed so each column's first nonzero entry is positive."""
    q, r = np.linalg.qr(phi)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    for j in range(q.shape[1]):
        nz = np.flatnonzero(np.abs(q[:, j]) > 1e-12)
        if nz.size and q[nz[0], j] < 0:
            q[:, j] = -q[:, j]
    return q


def orthonormal_init(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return qr_retract(rng.standard_normal((n, d)))


def optimal_predictor(phi: np.ndarray, target: np.ndarray, state_weights: np.ndarray | None = None) -> np.ndarray:
    """Least-squares predictor for E_{s~w, s+~T(s,.)} ||Psi^T phi(s) - phi(s+)||^2.

    Normal equations: (Phi^T W Phi) Psi = Phi^T W T Phi.
    """
    phi = np.asarray(phi, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n, d = phi.shape
    if target.shape != (n, n):
        raise DimensionError(f"target must be ({n}, {n}), got {target.shape}")
    w = np.full(n, 1.0 / n) if state_weights is None else np.asarray(state_weights, dtype=np.float64)
    gram = phi.T @ (w[:, None] * phi)
    rhs = phi.T @ (w[:, None] * (target @ phi))
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise NumericError("representation is rank deficient under the state weights") from None
    if np.diag(chol).min() <= 1e-10 * max(np.diag(chol).max(), 1e-300):
        raise NumericError("representation is rank deficient under the state weights")
    return scipy.linalg.cho_solve((chol, True), rhs)


def surrogate_error(phi: np.ndarray, psi: np.ndarray, target: np.ndarray) -> float:
    """||T - Phi Psi Phi^T||_F."""
    phi = np.asarray(phi)
    psi = np.asarray(psi)
    if psi.shape != (phi.shape[1], phi.shape[1]) or target.shape != (phi.shape[0], phi.shape[0]):
        raise DimensionError("shape mismatch between phi, psi and target")
    return float(np.linalg.norm(target - phi @ psi @ phi.T))


def byol_objective(phi: np.ndarray, psi: np.ndarray, target: np.ndarray, phi_bar: np.ndarray | None = None,
                   state_weights: np.ndarray | None = None) -> float:
    """Exact E_{s~w, s+~T(s,.)} ||Psi^T phi(s) - phi_bar(s+)||^2."""
    phi_bar = phi if phi_bar is None else phi_bar
    n = phi.shape[0]
    w = np.full(n, 1.0 / n) if state_weights is None else state_weights
    pred = phi @ psi  # row s is Psi^T phi(s)
    sq = ((pred[:, None, :] - phi_bar[None, :, :]) ** 2).sum(-1)
    return float(w @ (target * sq).sum(1))


def byol_objective_grad(phi: np.ndarray, psi: np.ndarray, target: np.ndarray, phi_bar: np.ndarray,
                        state_weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient in phi with phi_bar held fixed; rows of ``target`` sum to one."""
    n = phi.shape[0]
    w = np.full(n, 1.0 / n) if state_weights is None else state_weights
    pred = phi @ psi
    resid = pred * target.sum(1, keepdims=True) - target @ phi_bar
    return 2.0 * (w[:, None] * resid) @ psi.T


def jensen_lower_bound(phi: np.ndarray, psi: np.ndarray, target: np.ndarray, phi_bar: np.ndarray | None = None,
                       state_weights: np.ndarray | None = None) -> float:
    """Squared error against the mean target (T Phi_bar)(s) = (1 - gamma) psi^pi(s)."""
    phi_bar = phi if phi_bar is None else phi_bar
    n = phi.shape[0]
    w = np.full(n, 1.0 / n) if state_weights is None else state_weights
    resid = phi @ psi - target @ phi_bar
    return float(w @ (resid * resid).sum(1))


def is_symmetric(p: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.abs(p - p.T).max() <= tol)


def eckart_young_error(target: np.ndarray, d: int) -> float:
    """Best rank-d error of a symmetric matrix: tail of eigenvalues by magnitude."""
    ev = np.linalg.eigvalsh(target)
    ev = ev[np.argsort(-np.abs(ev))]
    return float(np.sqrt((ev[d:] ** 2).sum()))


def top_eigenspace(target: np.ndarray, d: int):
    """(basis, sorted |eigenvalues|) for a symmetric matrix."""
    ev, vec = np.linalg.eigh(target)
    order = np.argsort(-np.abs(ev))
    return vec[:, order[:d]], np.abs(ev[order])


def tied_eigenspace(target: np.ndarray, d: int, tol: float = 1e-9) -> np.ndarray:
    """Top-d eigenspace widened by every eigenvalue tied with the d-th (by magnitude).

    With a repeated eigenvalue at position d the top-d space is not unique;
    the widened space is the smallest invariant subspace containing all of them.
    """
    ev, vec = np.linalg.eigh(target)
    order = np.argsort(-np.abs(ev))
    mags = np.abs(ev[order])
    keep = int(np.sum(mags >= mags[d - 1] - tol))
    return vec[:, order[:keep]]


def largest_principal_angle(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(scipy.linalg.subspace_angles(a, b)))


def run_byol_flow(target: np.ndarray, d: int, cfg: OdeConfig, rng: np.random.Generator,
                  phi0: np.ndarray | None = None) -> OdeTrace:
    """Two-timescale flow: exact Psi*, one Euler step on Phi with Phi_bar frozen, retract."""
    n = target.shape[0]
    phi = orthonormal_init(n, d, rng) if phi0 is None else np.array(phi0, dtype=np.float64)
    trace = OdeTrace(target=target)

    def record(k, psi, g):
        trace.steps.append(k)
        trace.surrogate_values.append(surrogate_error(phi, psi, target))
        trace.grad_norms.append(float(np.linalg.norm(g)))
        trace.ortho_defects.append(ortho_defect(phi))

    psi = optimal_predictor(phi, target)
    for k in range(cfg.n_steps):
        g = n * byol_objective_grad(phi, psi, target, phi)
        if k % cfg.record_every == 0:
            record(k, psi, g)
        phi = phi - cfg.step_size * g
        if cfg.retraction == "qr":
            phi = qr_retract(phi)
        if not np.isfinite(phi).all():
            raise NumericError(f"representation diverged at step {k}")
        psi = optimal_predictor(phi, target)
    record(cfg.n_steps, psi, byol_objective_grad(phi, psi, target, phi))
    trace.final = LinearRepr(phi, psi)
    return trace


def byol_gamma_ode(mdp: FiniteMdp, policy: TabularPolicy, gamma: float, d: int, cfg: OdeConfig,
                   rng: np.random.Generator) -> OdeTrace:
    """BYOL-gamma flow on the normalized SR; gamma = 0 gives plain BYOL on P^pi.

    The orthogonal-init, uniform-start and symmetric-dynamics assumptions are
    checked rather than assumed.
    """
    p_pi = policy_transition(mdp, policy)
    if not is_symmetric(p_pi):
        raise PreconditionError("symmetric dynamics required: P^pi != (P^pi)^T")
    n = mdp.n_states
    if np.abs(mdp.initial_dist - 1.0 / n).max() > 1e-12:
        raise PreconditionError("uniform initial state distribution required")
    if not 1 <= d <= n:
        raise DomainError(f"d must lie in [1, {n}]")
    target = byol_gamma_target(p_pi, gamma)
    return run_byol_flow(target, d, cfg, rng)


def byol_gamma_target(p_pi: np.ndarray, gamma: float) -> np.ndarray:
    """Prediction-target matrix: P^pi itself at gamma = 0, else (1 - gamma) M."""
    return np.array(p_pi, dtype=np.float64) if gamma == 0.0 else normalized_sr(p_pi, gamma)


# -- Forward-Backward -----------------------------------------------------


def fb_loss(phi: np.ndarray, psi: np.ndarray, batch, gamma: float, targets=None):
    """Batch FB loss with gradients.

    ``phi``/``psi`` are (n, d) tables (backward / forward embeddings),
    ``batch`` is an (N, 3) integer array of (s_t, s_{t+1}, s') and
    ``targets`` = (phi_bar, psi_bar) defaults to the online tables.
    Returns ``(loss, dphi, dpsi)``; the targets receive no gradient.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[1] != 3 or len(batch) == 0:
        raise DimensionError("batch must be a non-empty (N, 3) array")
    if phi.shape != psi.shape:
        raise DimensionError("phi and psi tables must have the same shape")
    phi_bar, psi_bar = (phi, psi) if targets is None else targets
    s, s1, sp = batch.T
    n = len(batch)
    td = (psi[s] * phi[sp]).sum(1) - gamma * (psi_bar[s1] * phi_bar[sp]).sum(1)
    pos = (psi[s] * phi[s1]).sum(1)
    loss = float((td * td).mean() - 2.0 * pos.mean())
    gtd = (2.0 / n) * td[:, None]
    dpsi = np.zeros_like(psi)
    dphi = np.zeros_like(phi)
    np.add.at(dpsi, s, gtd * phi[sp] - (2.0 / n) * phi[s1])
    np.add.at(dphi, sp, gtd * psi[s])
    np.add.at(dphi, s1, -(2.0 / n) * psi[s])
    return loss, dphi, dpsi


def _fb_n_terms(phi, psi, p_pi, state_dist, gamma, n, targets):
    phi_bar, psi_bar = (phi, psi) if targets is None else targets
    p = state_dist
    a = psi @ phi.T  # a[s, s'] = psi(s).phi(s')
    pn = np.linalg.matrix_power(p_pi, n)
    b = psi_bar @ phi_bar.T  # b[s_n, s']
    # E_{s,s'} E_{s_n ~ P^n(s,.)} (a[s,s'] - gamma^n b[s_n,s'])^2
    gn = gamma**n
    sq = a * a - 2.0 * gn * a * (pn @ b) + gn * gn * (pn @ (b * b))
    first = float(p @ sq @ p)
    second = 0.0
    pk = np.eye(len(p))
    for i in range(1, n + 1):
        pk = pk @ p_pi
        second += gamma**i * float(p @ (pk * a).sum(1))
    return first - 2.0 * second


def fb_loss_exact(phi: np.ndarray, psi: np.ndarray, mdp: FiniteMdp, policy: TabularPolicy, gamma: float,
                  targets=None, state_dist: np.ndarray | None = None) -> float:
    """FB loss with every expectation enumerated (s_t, s' ~ p; s_{t+1} ~ P^pi)."""
    return fb_n_loss(phi, psi, mdp, policy, gamma, 1, targets=targets, state_dist=state_dist)


def fb_n_loss(phi: np.ndarray, psi: np.ndarray, mdp: FiniteMdp, policy: TabularPolicy, gamma: float, n: int,
              targets=None, state_dist: np.ndarray | None = None) -> float:
    """n-step FB loss, all expectations exact. ``state_dist`` defaults to the MDP's p0."""
    if n < 1:
        raise DomainError("n must be >= 1")
    p_pi = policy_transition(mdp, policy)
    p = mdp.initial_dist if state_dist is None else np.asarray(state_dist, dtype=np.float64)
    return _fb_n_terms(phi, psi, p_pi, p, gamma, n, targets)


def fb_n_limit(phi: np.ndarray, psi: np.ndarray, mdp: FiniteMdp, policy: TabularPolicy, gamma: float,
               state_dist: np.ndarray | None = None) -> float:
    """Closed form of the n -> infinity loss: E[(psi.phi')^2] - 2 gamma/(1-gamma) E_geom[psi.phi]."""
    p_pi = policy_transition(mdp, policy)
    p = mdp.initial_dist if state_dist is None else np.asarray(state_dist, dtype=np.float64)
    a = psi @ phi.T
    m_tilde = normalized_sr(p_pi, gamma)
    return float(p @ (a * a) @ p) - 2.0 * gamma / (1.0 - gamma) * float(p @ (m_tilde * a).sum(1))


def _fb_exact_grads(phi, psi, phi_bar, psi_bar, p_pi, p, gamma):
    """Gradients of the exact FB loss w.r.t. the online tables."""
    a = psi @ phi.T
    b = psi_bar @ phi_bar.T
    resid = a - gamma * (p_pi @ b)  # E over s_{t+1} of the TD residual
    wres = p[:, None] * resid * p[None, :]
    wpos = p[:, None] * p_pi
    g_a = 2.0 * wres - 2.0 * wpos
    return g_a.T @ psi, g_a @ phi  # (dphi, dpsi)


def fb_train_tabular(mdp: FiniteMdp, policy: TabularPolicy, gamma: float, d: int, steps: int, lr: float,
                     tau: float, rng: np.random.Generator, state_dist: np.ndarray | None = None,
                     init_scale: float = 0.1):
    """Full-expectation gradient descent on the FB loss with EMA targets.

    Returns ``(phi, psi)``; ``psi(s) . phi(s') p(s')`` approximates M^pi(s, s').
    """
    n = mdp.n_states
    if not 1 <= d <= n:
        raise DomainError(f"d must lie in [1, {n}]")
    p_pi = policy_transition(mdp, policy)
    p = np.full(n, 1.0 / n) if state_dist is None else np.asarray(state_dist, dtype=np.float64)
    phi = init_scale * rng.standard_normal((n, d))
    psi = init_scale * rng.standard_normal((n, d))
    phi_bar, psi_bar = phi.copy(), psi.copy()
    for k in range(steps):
        dphi, dpsi = _fb_exact_grads(phi, psi, phi_bar, psi_bar, p_pi, p, gamma)
        phi = phi - lr * dphi
        psi = psi - lr * dpsi
        if not (np.isfinite(phi).all() and np.isfinite(psi).all()):
            raise NumericError(f"FB training diverged at step {k}")
        phi_bar = tau * phi + (1.0 - tau) * phi_bar
        psi_bar = tau * psi + (1.0 - tau) * psi_bar
    return phi, psi


def fb_reconstruction(phi: np.ndarray, psi: np.ndarray, state_dist: np.ndarray) -> np.ndarray:
    return (psi @ phi.T) * state_dist[None, :]


def relative_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# -- InfoNCE free critic --------------------------------------------------


def critic_rows(critic: np.ndarray, marginal: np.ndarray) -> np.ndarray:
    """Rows of softmax(F[s, :]) reweighted by the negative marginal."""
    logits = critic + np.log(marginal)[None, :]
    logits = logits - logits.max(1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(1, keepdims=True)


def total_variation(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p - q).sum(-1)


def infonce_optimal_critic(mdp: FiniteMdp, policy: TabularPolicy, gamma: float, steps: int, lr: float,
                           rng: np.random.Generator, *, batch_size: int = 512, n_negatives: int = 31,
                           marginal: np.ndarray | None = None) -> np.ndarray:
    """Fit a free logit table F[s, s'] by sampled InfoNCE.

    Anchors and negatives come from ``marginal`` (uniform by default) and
    positives exactly from rows of the normalized SR. The learning rate
    decays linearly to zero so the last iterates average out sampling noise.
    """
    n = mdp.n_states
    q = np.full(n, 1.0 / n) if marginal is None else np.asarray(marginal, dtype=np.float64)
    m_tilde = normalized_sr(policy_transition(mdp, policy), gamma)
    cdf = np.cumsum(m_tilde, axis=1)
    cdf[:, -1] = 1.0
    critic = np.zeros((n, n))
    opt = AdamState.zeros_like([critic], lr=lr)
    params = [critic]
    K = n_negatives
    rows = np.arange(batch_size)
    for k in range(steps):
        s = rng.choice(n, size=batch_size, p=q)
        u = rng.random(batch_size)
        pos = (u[:, None] > cdf[s]).sum(1)
        neg = rng.choice(n, size=(batch_size, K), p=q)
        cand = np.concatenate([pos[:, None], neg], axis=1)
        logits = params[0][s[:, None], cand]
        logits = logits - logits.max(1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(1, keepdims=True)
        g = prob
        g[:, 0] -= 1.0
        grad = np.zeros((n, n))
        np.add.at(grad, (np.repeat(s, K + 1), cand.ravel()), (g / batch_size).ravel())
        if not np.isfinite(grad).all():
            raise NumericError(f"InfoNCE critic diverged at step {k}")
        opt.lr = lr * (1.0 - k / steps)
        adam_step(opt, params, [grad])
    return params[0]
