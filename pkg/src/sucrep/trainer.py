"""Goal-conditioned behavioral cloning with auxiliary representation losses.

The policy is ``pi(a | z_s, z_g)`` where ``z`` are ensemble-averaged encoder
outputs. Auxiliary objectives (BYOL, BYOL-gamma, TRA, FB) act on each
ensemble member separately and are added with weight ``alpha``.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import nnkit as nk
from .envgen import N_ACTIONS, STAY, Dataset, parse_maze, state_features
from .errors import ConfigError, NumericError
from .mdp_core import geometric_offsets

METHODS = ("none", "byol", "byol_gamma", "tra", "fb")
LOSSES = ("ce", "l2")
TRA_LAMBDA = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.0
    gamma: float = 0.99  # discount of the representation target offset
    goal_gamma: float = 0.99  # discount of the BC goal offset
    method: str = "none"
    loss_f: str = "ce"
    action_conditioned: bool = True
    bidirectional: bool = True
    tau: float = 1.0
    fb_tau: float = 0.005
    batch_size: int = 256
    steps: int = 4000
    ensemble_size: int = 2
    seed: int = 0
    lr: float = 3e-4
    record_every: int = 100
    repr_dim: int = 0  # 0 means "number of states"
    encoder_hidden: tuple = (64, 64)
    predictor_hidden: tuple = (64, 64)
    actor_hidden: tuple = (256, 256)
    activation: str = "gelu"
    features: str = "onehot"
    dtype: str = "float32"
    goal_pathway: str = "phi"
    log_wall_time: bool = False

    def __post_init__(self):
        for name in ("encoder_hidden", "predictor_hidden", "actor_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        validate(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def validate(cfg: TrainConfig) -> None:
    if cfg.alpha < 0:
        raise ConfigError("alpha must be >= 0")
    for name in ("gamma", "goal_gamma"):
        g = getattr(cfg, name)
        if not 0.0 <= g < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1)")
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}; expected one of {METHODS}")
    if cfg.loss_f not in LOSSES:
        raise ConfigError(f"unknown loss_f {cfg.loss_f!r}")
    if cfg.ensemble_size < 1:
        raise ConfigError("ensemble_size must be >= 1")
    if cfg.batch_size < 2 or cfg.steps < 0 or cfg.record_every < 1:
        raise ConfigError("batch_size >= 2, steps >= 0 and record_every >= 1 required")
    if not (0.0 <= cfg.tau <= 1.0 and 0.0 <= cfg.fb_tau <= 1.0):
        raise ConfigError("EMA rates must lie in [0, 1]")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    if cfg.goal_pathway not in ("phi", "psi"):
        raise ConfigError("goal_pathway must be phi or psi")
    if cfg.features not in ("onehot", "xy"):
        raise ConfigError("features must be onehot or xy")
    if cfg.method in ("tra", "fb") and cfg.bidirectional and cfg.alpha > 0:
        raise ConfigError(f"bidirectional prediction is only defined for byol/byol_gamma, not {cfg.method}")


# -- config files ---------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, text: str):
    default = _FIELDS[name].default
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    try:
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; '#' comments; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, val)
    return (base or TrainConfig()).replace(**values)


def format_config(cfg: TrainConfig) -> str:
    out = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out.append(f"{name} = {v}")
    return "\n".join(out) + "\n"


# -- model ----------------------------------------------------------------


@dataclass
class ModelParams:
    encoders: list
    forward_predictors: list
    backward_predictors: list
    actor_head: list
    ema_targets: list  # EmaTarget per encoder
    predictor_targets: list  # EmaTarget per forward predictor (FB bootstrap)
    specs: dict

    @property
    def ensemble_size(self) -> int:
        return len(self.encoders)

    def online(self) -> list:
        """All trainable tensors in a fixed order."""
        out = []
        for group in (self.encoders, self.forward_predictors, self.backward_predictors):
            for p in group:
                out.extend(p)
        out.extend(self.actor_head)
        return out

    def named_tensors(self) -> dict:
        named = {}
        for group in ("encoders", "forward_predictors", "backward_predictors"):
            for i, p in enumerate(getattr(self, group)):
                for j, t in enumerate(p):
                    named[f"{group}.{i}.{j}"] = t
        for j, t in enumerate(self.actor_head):
            named[f"actor_head.{j}"] = t
        for i, e in enumerate(self.ema_targets):
            for j, t in enumerate(e.params):
                named[f"ema_targets.{i}.{j}"] = t
        for i, e in enumerate(self.predictor_targets):
            for j, t in enumerate(e.params):
                named[f"predictor_targets.{i}.{j}"] = t
        return named


def model_specs(cfg: TrainConfig, feat_dim: int, n_states: int) -> dict:
    d = cfg.repr_dim or n_states
    # base BYOL predicts from phi(s_t) alone
    conditioned = cfg.action_conditioned and cfg.method != "byol"
    pred_in = d + (N_ACTIONS if conditioned else 0)
    return {
        "encoder": nk.MlpSpec(feat_dim, d, cfg.encoder_hidden, cfg.activation),
        "forward_predictor": nk.MlpSpec(pred_in, d, cfg.predictor_hidden, cfg.activation),
        "backward_predictor": nk.MlpSpec(d, d, cfg.predictor_hidden, cfg.activation),
        "actor_head": nk.MlpSpec(2 * d, N_ACTIONS, cfg.actor_hidden, cfg.activation),
    }


def init_params(cfg: TrainConfig, feat_dim: int, n_states: int, rng: np.random.Generator) -> ModelParams:
    specs = model_specs(cfg, feat_dim, n_states)
    dt = cfg.np_dtype
    E = cfg.ensemble_size
    # Every network is always created so the init stream is method-independent.
    enc = [nk.init_mlp(specs["encoder"], rng, dt) for _ in range(E)]
    fwd = [nk.init_mlp(specs["forward_predictor"], rng, dt) for _ in range(E)]
    bwd = [nk.init_mlp(specs["backward_predictor"], rng, dt) for _ in range(E)]
    actor = nk.init_mlp(specs["actor_head"], rng, dt)
    tau_enc = cfg.fb_tau if cfg.method == "fb" else cfg.tau
    ema = [nk.EmaTarget([t.copy() for t in p], tau_enc) for p in enc]
    ptarg = [nk.EmaTarget([t.copy() for t in p], cfg.fb_tau) for p in fwd]
    return ModelParams(enc, fwd, bwd, actor, ema, ptarg, specs)


def state_pathway(cfg: TrainConfig) -> str:
    """Action-free TRA/FB feed the policy psi(s); everything else uses phi(s)."""
    if cfg.method in ("tra", "fb") and not cfg.action_conditioned:
        return "psi"
    return "phi"


# -- batches --------------------------------------------------------------


@dataclass
class BatchSample:
    states: np.ndarray  # cell indices s_t
    actions: np.ndarray  # a_t
    next_states: np.ndarray  # s_{t+1}
    next_actions: np.ndarray  # a_{t+1} (STAY at trajectory end)
    goals: np.ndarray  # s_{t+k}
    offsets: np.ndarray  # k
    traj_index: np.ndarray
    time_index: np.ndarray
    state_feats: np.ndarray = None
    goal_feats: np.ndarray = None
    next_feats: np.ndarray = None
    action_feats: np.ndarray = None


class _FlatData:
    """Concatenated trajectory arrays for fast index sampling."""

    def __init__(self, ds: Dataset):
        if not ds.trajectories:
            raise ValueError("dataset is empty")
        lengths = np.array([len(t.states) for t in ds.trajectories])
        if (lengths < 2).any():
            raise ValueError("every trajectory needs at least two states")
        self.lengths = lengths
        self.starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.states = np.concatenate([np.asarray(t.states, dtype=np.int64) for t in ds.trajectories])
        acts = []
        for t in ds.trajectories:
            acts.append(np.append(np.asarray(t.actions, dtype=np.int64), STAY))
        self.actions = np.concatenate(acts)
        # Transitions: (trajectory, t) with t < T, uniformly.
        n_trans = lengths - 1
        self.trans_traj = np.repeat(np.arange(len(lengths)), n_trans)
        self.trans_t = np.concatenate([np.arange(n) for n in n_trans])


_FLAT_CACHE: dict = {}


def _flat(ds: Dataset) -> _FlatData:
    key = id(ds)
    hit = _FLAT_CACHE.get(key)
    if hit is None or hit[0] is not ds:
        hit = (ds, _FlatData(ds))
        _FLAT_CACHE.clear()
        _FLAT_CACHE[key] = hit
    return hit[1]


def sample_batch(dataset: Dataset, gamma: float, batch_size: int, rng: np.random.Generator,
                 features: np.ndarray | None = None) -> BatchSample:
    """Uniform (trajectory, t) transitions with a truncated-geometric future goal."""
    fd = _flat(dataset)
    pick = rng.integers(len(fd.trans_traj), size=batch_size)
    traj = fd.trans_traj[pick]
    t = fd.trans_t[pick]
    last = fd.lengths[traj] - 1
    k = geometric_offsets(gamma, last - t, rng)
    base = fd.starts[traj]
    b = BatchSample(
        states=fd.states[base + t],
        actions=fd.actions[base + t],
        next_states=fd.states[base + t + 1],
        next_actions=fd.actions[base + t + 1],
        goals=fd.states[base + t + k],
        offsets=k,
        traj_index=traj,
        time_index=t,
    )
    if features is not None:
        featurize(b, features)
    return b


def featurize(b: BatchSample, features: np.ndarray) -> BatchSample:
    b.state_feats = features[b.states]
    b.goal_feats = features[b.goals]
    b.next_feats = features[b.next_states]
    b.action_feats = np.eye(N_ACTIONS, dtype=features.dtype)[b.actions]
    return b


def aux_targets(dataset: Dataset, b: BatchSample, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Resample the future offset for the auxiliary target from the same (trajectory, t)."""
    fd = _flat(dataset)
    last = fd.lengths[b.traj_index] - 1
    k = geometric_offsets(gamma, last - b.time_index, rng)
    return fd.states[fd.starts[b.traj_index] + b.time_index + k]


# -- forward pieces -------------------------------------------------------


def _encode_all(params: ModelParams, x: np.ndarray):
    outs, caches = [], []
    for p in params.encoders:
        z, c = nk.forward(p, params.specs["encoder"], x)
        outs.append(z)
        caches.append(c)
    return outs, caches


def encode_mean(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return sum(nk.apply(p, params.specs["encoder"], x) for p in params.encoders) / params.ensemble_size


def _pred_input(z: np.ndarray, action_feats: np.ndarray | None) -> np.ndarray:
    return z if action_feats is None else np.concatenate([z, action_feats], axis=1)


def policy_goal_input(params: ModelParams, goal_features: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Goal embedding seen by the actor: ensemble mean of phi(g), or psi(g) when configured."""
    if cfg.goal_pathway == "psi" and not cfg.action_conditioned:
        spec = params.specs["forward_predictor"]
        return sum(
            nk.apply(fp, spec, nk.apply(ep, params.specs["encoder"], goal_features))
            for ep, fp in zip(params.encoders, params.forward_predictors)
        ) / params.ensemble_size
    return encode_mean(params, goal_features)


def policy_state_input(params: ModelParams, state_features: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if state_pathway(cfg) == "psi":
        spec = params.specs["forward_predictor"]
        return sum(
            nk.apply(fp, spec, nk.apply(ep, params.specs["encoder"], state_features))
            for ep, fp in zip(params.encoders, params.forward_predictors)
        ) / params.ensemble_size
    return encode_mean(params, state_features)


def policy_logits(params: ModelParams, cfg: TrainConfig, state_feats: np.ndarray, goal_feats: np.ndarray) -> np.ndarray:
    zs = policy_state_input(params, state_feats, cfg)
    zg = policy_goal_input(params, goal_feats, cfg)
    return nk.apply(params.actor_head, params.specs["actor_head"], np.concatenate([zs, zg], axis=1))


# -- losses ---------------------------------------------------------------


class _Grads:
    """Gradient accumulator mirroring ModelParams' trainable groups."""

    def __init__(self, params: ModelParams):
        zeros = lambda group: [[np.zeros_like(t) for t in p] for p in group]
        self.encoders = zeros(params.encoders)
        self.forward_predictors = zeros(params.forward_predictors)
        self.backward_predictors = zeros(params.backward_predictors)
        self.actor_head = [np.zeros_like(t) for t in params.actor_head]

    def add(self, group: str, i, grads, scale=1.0):
        dst = getattr(self, group) if i is None else getattr(self, group)[i]
        for d, g in zip(dst, grads):
            d += scale * g if scale != 1.0 else g

    def flat(self) -> list:
        out = []
        for group in (self.encoders, self.forward_predictors, self.backward_predictors):
            for p in group:
                out.extend(p)
        out.extend(self.actor_head)
        return out


@dataclass
class _Forward:
    """Cached encoder passes over the stacked rows [s; g; extra]."""

    z: list  # per member (rows, d)
    caches: list
    n: int  # batch size
    extra: int  # number of extra row blocks after s and g

    def block(self, i: int, j: int) -> np.ndarray:
        return self.z[i][j * self.n:(j + 1) * self.n]


def _run_encoders(params: ModelParams, blocks: list) -> _Forward:
    x = np.concatenate(blocks, axis=0)
    z, caches = _encode_all(params, x)
    return _Forward(z, caches, len(blocks[0]), len(blocks) - 2)


def _bc_terms(params: ModelParams, cfg: TrainConfig, fw: _Forward, actions: np.ndarray,
              gz: list, grads: _Grads | None, pred_in_state=None):
    """Mean NLL of the actor; accumulates grads into encoder-output buffers ``gz``."""
    E = params.ensemble_size
    if state_pathway(cfg) == "psi":
        zs_members, pcaches = [], []
        for i in range(E):
            out, c = nk.forward(params.forward_predictors[i], params.specs["forward_predictor"], fw.block(i, 0))
            zs_members.append(out)
            pcaches.append(c)
    else:
        zs_members = [fw.block(i, 0) for i in range(E)]
    zs = sum(zs_members) / E
    if cfg.goal_pathway == "psi" and not cfg.action_conditioned:
        zg_members, gcaches = [], []
        for i in range(E):
            out, c = nk.forward(params.forward_predictors[i], params.specs["forward_predictor"], fw.block(i, 1))
            zg_members.append(out)
            gcaches.append(c)
    else:
        zg_members = [fw.block(i, 1) for i in range(E)]
    zg = sum(zg_members) / E
    h = np.concatenate([zs, zg], axis=1)
    logits, acache = nk.forward(params.actor_head, params.specs["actor_head"], h)
    nll, glog = nk.nll_grad(logits, actions)
    loss = float(nll.mean())
    if grads is None:
        return loss
    agrads, gh = nk.backward(params.actor_head, params.specs["actor_head"], acache, glog / len(actions))
    grads.add("actor_head", None, agrads)
    d = zs.shape[1]
    gzs, gzg = gh[:, :d] / E, gh[:, d:] / E
    n = fw.n
    for i in range(E):
        if state_pathway(cfg) == "psi":
            pg, gin = nk.backward(params.forward_predictors[i], params.specs["forward_predictor"], pcaches[i], gzs)
            grads.add("forward_predictors", i, pg)
            gz[i][:n] += gin[:, :d]
        else:
            gz[i][:n] += gzs
        if cfg.goal_pathway == "psi" and not cfg.action_conditioned:
            pg, gin = nk.backward(params.forward_predictors[i], params.specs["forward_predictor"], gcaches[i], gzg)
            grads.add("forward_predictors", i, pg)
            gz[i][n:2 * n] += gin[:, :d]
        else:
            gz[i][n:2 * n] += gzg
    return loss


def _f_grad(cfg: TrainConfig):
    return nk.f_ce_grad if cfg.loss_f == "ce" else nk.f_l2_grad


def _target_encode(params: ModelParams, i: int, x: np.ndarray, online: np.ndarray | None) -> np.ndarray:
    # With tau == 1 the EMA copy equals the online encoder, so reuse the online pass.
    if params.ema_targets[i].tau == 1.0 and online is not None:
        return online
    return nk.apply(params.ema_targets[i].params, params.specs["encoder"], x)


def _byol_terms(params, cfg, fw, b, plus_block, x_plus, gz, grads, scale):
    """Sum over members of the mean BYOL(-gamma) loss; grads scaled by ``scale``."""
    E = params.ensemble_size
    n = fw.n
    f = _f_grad(cfg)
    fspec = params.specs["forward_predictor"]
    bspec = params.specs["backward_predictor"]
    act = b.action_feats if (cfg.action_conditioned and cfg.method == "byol_gamma") else None
    bidir = cfg.bidirectional and cfg.method == "byol_gamma"
    total = 0.0
    for i in range(E):
        zs = fw.block(i, 0)
        zp = fw.block(i, plus_block)
        target_p = nk.stopgrad(_target_encode(params, i, x_plus, zp))
        pred, pc = nk.forward(params.forward_predictors[i], fspec, _pred_input(zs, act))
        val, gpred, _ = f(pred, target_p)
        total += float(val.mean())
        if grads is not None:
            pg, gin = nk.backward(params.forward_predictors[i], fspec, pc, gpred * (scale / n))
            grads.add("forward_predictors", i, pg)
            gz[i][:n] += gin[:, :zs.shape[1]]
        if bidir:
            target_s = nk.stopgrad(_target_encode(params, i, b.state_feats, zs))
            predb, bc = nk.forward(params.backward_predictors[i], bspec, zp)
            # backward predictor: psi_b(phi(s_+)) predicts the past target phi_bar(s_t)
            val, gpred, _ = f(predb, target_s)
            total += float(val.mean())
            if grads is not None:
                pg, gin = nk.backward(params.backward_predictors[i], bspec, bc, gpred * (scale / n))
                grads.add("backward_predictors", i, pg)
                gz[i][plus_block * n:(plus_block + 1) * n] += gin
    return total


def _tra_terms(params, cfg, fw, b, plus_block, gz, grads, scale):
    E = params.ensemble_size
    n = fw.n
    fspec = params.specs["forward_predictor"]
    act = b.action_feats if cfg.action_conditioned else None
    total = 0.0
    for i in range(E):
        zs = fw.block(i, 0)
        zp = fw.block(i, plus_block)
        d = zp.shape[1]
        psi, pc = nk.forward(params.forward_predictors[i], fspec, _pred_input(zs, act))
        # Row and column cross-entropies summed, as in the symmetric TRA loss.
        nce, gpsi, gphi = nk.infonce_grad(psi, zp, symmetric=True)
        reg = TRA_LAMBDA * float(((zp * zp).sum(1) + (psi * psi).sum(1)).mean()) / d
        total += 2.0 * nce + reg
        if grads is not None:
            gpsi = 2.0 * gpsi + (2.0 * TRA_LAMBDA / (d * n)) * psi
            gphi = 2.0 * gphi + (2.0 * TRA_LAMBDA / (d * n)) * zp
            pg, gin = nk.backward(params.forward_predictors[i], fspec, pc, gpsi * scale)
            grads.add("forward_predictors", i, pg)
            gz[i][:n] += gin[:, :d]
            gz[i][plus_block * n:(plus_block + 1) * n] += gphi * scale
    return total


def _fb_terms(params, cfg, fw, b, next_block, perm, gz, grads, scale):
    """Batch FB loss; s' are the batch states under ``perm``."""
    E = params.ensemble_size
    n = fw.n
    fspec = params.specs["forward_predictor"]
    act = b.action_feats if cfg.action_conditioned else None
    next_act = np.eye(N_ACTIONS, dtype=b.state_feats.dtype)[b.next_actions] if cfg.action_conditioned else None
    gamma = cfg.gamma
    total = 0.0
    for i in range(E):
        zs = fw.block(i, 0)
        znext = fw.block(i, next_block)
        d = zs.shape[1]
        psi, pc = nk.forward(params.forward_predictors[i], fspec, _pred_input(zs, act))
        phi_p = zs[perm]
        tgt_enc = params.ema_targets[i]
        phi_bar_p = nk.apply(tgt_enc.params, params.specs["encoder"], b.state_feats[perm])
        phi_bar_next = nk.apply(tgt_enc.params, params.specs["encoder"], b.next_feats)
        psi_bar_next = nk.apply(params.predictor_targets[i].params, fspec, _pred_input(phi_bar_next, next_act))
        td = (psi * phi_p).sum(1) - gamma * (psi_bar_next * phi_bar_p).sum(1)
        pos = (psi * znext).sum(1)
        total += float((td * td).mean() - 2.0 * pos.mean())
        if grads is not None:
            gtd = (2.0 / n) * td[:, None]
            gpsi = gtd * phi_p - (2.0 / n) * znext
            gphi_p = gtd * psi
            gznext = -(2.0 / n) * psi
            pg, gin = nk.backward(params.forward_predictors[i], fspec, pc, gpsi * scale)
            grads.add("forward_predictors", i, pg)
            gz[i][:n] += gin[:, :d]
            np.add.at(gz[i], perm, gphi_p * scale)
            gz[i][next_block * n:(next_block + 1) * n] += gznext * scale
    return total


@dataclass
class StepResult:
    bc_loss: float
    aux_loss: float
    total_loss: float
    grads: list | None


def compute_losses(params: ModelParams, cfg: TrainConfig, b: BatchSample, *,
                   aux_plus_feats: np.ndarray | None = None, perm: np.ndarray | None = None,
                   with_grads: bool = True, include_bc: bool = True, include_aux: bool = True) -> StepResult:
    """BC loss plus ``alpha`` times the configured auxiliary, with full gradients.

    ``aux_plus_feats`` overrides the auxiliary target rows (used when the
    representation discount differs from the goal discount). ``perm`` is the
    s' shuffle for FB.
    """
    use_aux = include_aux and cfg.alpha > 0 and cfg.method != "none"
    blocks = [b.state_feats, b.goal_feats]
    plus_block = 1
    next_block = None
    if use_aux:
        if cfg.method in ("byol", "fb"):
            blocks.append(b.next_feats)
            plus_block = next_block = 2
        elif aux_plus_feats is not None:
            blocks.append(aux_plus_feats)
            plus_block = 2
    fw = _run_encoders(params, blocks)
    grads = _Grads(params) if with_grads else None
    gz = [np.zeros_like(z) for z in fw.z] if with_grads else None
    bc = _bc_terms(params, cfg, fw, b.actions, gz, grads) if include_bc else 0.0
    aux = 0.0
    if use_aux:
        x_plus = blocks[plus_block]
        if cfg.method in ("byol", "byol_gamma"):
            aux = _byol_terms(params, cfg, fw, b, plus_block, x_plus, gz, grads, cfg.alpha)
        elif cfg.method == "tra":
            aux = _tra_terms(params, cfg, fw, b, plus_block, gz, grads, cfg.alpha)
        elif cfg.method == "fb":
            if perm is None:
                raise ValueError("FB needs a permutation of the batch for s'")
            aux = _fb_terms(params, cfg, fw, b, next_block, perm, gz, grads, cfg.alpha)
    total = bc + cfg.alpha * aux
    flat = None
    if with_grads:
        for i, p in enumerate(params.encoders):
            eg, _ = nk.backward(p, params.specs["encoder"], fw.caches[i], gz[i])
            grads.add("encoders", i, eg)
        flat = grads.flat()
    return StepResult(bc, aux, total, flat)


# -- training loop --------------------------------------------------------


@dataclass
class Streams:
    """Independent RNG streams so ablations consume randomness identically."""

    init: np.random.Generator
    batch: np.random.Generator
    aux: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        ss = np.random.SeedSequence(seed)
        a, b, c = ss.spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))


METRIC_COLUMNS = ("step", "bc_loss", "aux_loss", "total_loss", "grad_norm", "wall_ms")


def dataset_features(dataset: Dataset, cfg: TrainConfig):
    maze = parse_maze(dataset.maze_name)
    return maze, state_features(maze, cfg.features, cfg.np_dtype)


def train(dataset: Dataset, cfg: TrainConfig, *, on_record=None):
    """Run ``cfg.steps`` Adam updates. Returns ``(params, metrics)``.

    ``metrics`` is a list of dicts keyed by METRIC_COLUMNS, recorded at step
    0 (before any update) and every ``record_every`` steps after.
    """
    maze, feats = dataset_features(dataset, cfg)
    streams = Streams.from_seed(cfg.seed)
    params = init_params(cfg, feats.shape[1], maze.n_cells, streams.init)
    online = params.online()
    opt = nk.AdamState.zeros_like(online, lr=cfg.lr)
    metrics = []
    t0 = time.perf_counter()
    separate_aux = cfg.method == "byol_gamma" and cfg.gamma != cfg.goal_gamma and cfg.alpha > 0
    for step in range(cfg.steps + 1):
        b = sample_batch(dataset, cfg.goal_gamma, cfg.batch_size, streams.batch, feats)
        aux_plus = None
        perm = None
        if cfg.alpha > 0:
            if separate_aux:
                aux_plus = feats[aux_targets(dataset, b, cfg.gamma, streams.aux)]
            if cfg.method == "fb":
                perm = streams.aux.permutation(cfg.batch_size)
        res = compute_losses(params, cfg, b, aux_plus_feats=aux_plus, perm=perm,
                             with_grads=step < cfg.steps)
        if not math.isfinite(res.total_loss):
            raise NumericError(f"non-finite loss at step {step}")
        if step % cfg.record_every == 0 or step == cfg.steps:
            gnorm = nk.global_norm(res.grads) if res.grads is not None else 0.0
            row = {
                "step": step,
                "bc_loss": res.bc_loss,
                "aux_loss": res.aux_loss,
                "total_loss": res.total_loss,
                "grad_norm": gnorm,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if cfg.log_wall_time else 0.0,
            }
            metrics.append(row)
            if on_record is not None:
                on_record(row)
        if step == cfg.steps:
            break
        try:
            nk.adam_step(opt, online, res.grads)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        params.ema_targets = [nk.ema_update(e, p) for e, p in zip(params.ema_targets, params.encoders)]
        if cfg.method == "fb":
            params.predictor_targets = [nk.ema_update(e, p) for e, p in
                                        zip(params.predictor_targets, params.forward_predictors)]
    return params, metrics


def params_descriptor(params: ModelParams, cfg: TrainConfig, feat_dim: int, n_states: int) -> dict:
    return {
        "kind": "sucrep-gcbc",
        "config": format_config(cfg),
        "feat_dim": feat_dim,
        "n_states": n_states,
        "specs": {k: v.to_dict() for k, v in params.specs.items()},
    }


def params_from_tensors(tensors: dict, descriptor: dict):
    """Rebuild ``(params, cfg)`` from a checkpoint payload."""
    cfg = parse_config(descriptor["config"])
    dt = cfg.np_dtype
    specs = {k: nk.MlpSpec(v["input_dim"], v["output_dim"], tuple(v["hidden"]), v["activation"])
             for k, v in descriptor["specs"].items()}

    def group(name, count):
        out = []
        for i in range(count):
            j = 0
            p = []
            while f"{name}.{i}.{j}" in tensors:
                p.append(tensors[f"{name}.{i}.{j}"].astype(dt))
                j += 1
            out.append(p)
        return out

    E = cfg.ensemble_size
    actor = []
    j = 0
    while f"actor_head.{j}" in tensors:
        actor.append(tensors[f"actor_head.{j}"].astype(dt))
        j += 1
    tau_enc = cfg.fb_tau if cfg.method == "fb" else cfg.tau
    params = ModelParams(
        group("encoders", E), group("forward_predictors", E), group("backward_predictors", E), actor,
        [nk.EmaTarget(p, tau_enc) for p in group("ema_targets", E)],
        [nk.EmaTarget(p, cfg.fb_tau) for p in group("predictor_targets", E)],
        specs,
    )
    return params, cfg
