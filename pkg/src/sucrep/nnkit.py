"""Small numpy network toolkit with hand-written reverse mode.

Parameters of one MLP are a flat list ``[W0, b0, W1, b1, ...]`` with
``W_i`` of shape (fan_in, fan_out). Forward passes return a cache that
``backward`` consumes.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactError, DimensionError, DomainError, NumericError

_GELU_C = math.sqrt(2.0 / math.pi)
_EPS = 1e-12

# Incremented whenever f_l2 sees two zero vectors.
warning_counts = {"f_l2_zero": 0, "cosine_zero": 0}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden: tuple = (64, 64)
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple:
        return (self.input_dim,) + self.hidden + (self.output_dim,)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "hidden": list(self.hidden), "activation": self.activation}


def init_mlp(spec: MlpSpec, rng: np.random.Generator, dtype=np.float64) -> list:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    params = []
    for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        params.append(np.zeros(fan_out, dtype=dtype))
    return params


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0)
    # z * z * z: np.power is two orders of magnitude slower here
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z * z))
    return 0.5 * z * (1.0 + t)


def _act_grad(name, z):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z2)


def forward(params: list, spec: MlpSpec, x: np.ndarray, *, check: bool = False):
    """Returns ``(output, cache)``. The last layer is linear."""
    if x.shape[-1] != spec.input_dim:
        raise DimensionError(f"input dim {x.shape[-1]} != spec input_dim {spec.input_dim}")
    if check and not np.isfinite(x).all():
        raise NumericError("non-finite network input")
    n_layers = len(params) // 2
    cache = []
    h = x
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        z = h @ W + b
        cache.append((h, z))
        h = z if i == n_layers - 1 else _act(spec.activation, z)
    return h, cache


def apply(params: list, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    return forward(params, spec, x)[0]


def backward(params: list, spec: MlpSpec, cache, grad_out: np.ndarray):
    """Reverse pass. Returns ``(param_grads, grad_input)``."""
    if cache is None:
        raise ValueError("backward needs the cache from forward")
    n_layers = len(params) // 2
    grads = [None] * len(params)
    g = grad_out
    for i in reversed(range(n_layers)):
        h, z = cache[i]
        if i != n_layers - 1:
            g = g * _act_grad(spec.activation, z)
        grads[2 * i] = h.T @ g
        grads[2 * i + 1] = g.sum(0)
        g = g @ params[2 * i].T
    return grads, g


# -- stop-gradient --------------------------------------------------------


class StopGrad:
    """A value treated as a constant by the gradient helpers below."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value)


def stopgrad(x) -> StopGrad:
    return x if isinstance(x, StopGrad) else StopGrad(x)


def _unwrap(x):
    if isinstance(x, StopGrad):
        return x.value, False
    return np.asarray(x), True


def dot_and_grad(a, b):
    """<a, b> with gradients; a stop-gradient operand gets a zero gradient."""
    av, a_live = _unwrap(a)
    bv, b_live = _unwrap(b)
    value = float(np.sum(av * bv))
    ga = bv.copy() if a_live else np.zeros_like(av)
    gb = av.copy() if b_live else np.zeros_like(bv)
    return value, ga, gb


# -- losses ---------------------------------------------------------------
# Batched helpers act on the last axis and return per-row values plus the
# gradient of values.sum().


def _log_softmax(x):
    x = x - x.max(-1, keepdims=True)
    return x - np.log(np.exp(x).sum(-1, keepdims=True))


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def f_l2(a, b):
    return f_l2_grad(a, b)[0]


def f_l2_grad(a, b):
    """|| a/|a| - b/|b| ||^2 = 2 - 2 cos(a, b)."""
    av, a_live = _unwrap(a)
    bv, b_live = _unwrap(b)
    na = np.sqrt((av * av).sum(-1, keepdims=True))
    nb = np.sqrt((bv * bv).sum(-1, keepdims=True))
    both_zero = (na <= _EPS) & (nb <= _EPS)
    if both_zero.any():
        warning_counts["f_l2_zero"] += int(both_zero.sum())
    ua = av / np.maximum(na, _EPS)
    ub = bv / np.maximum(nb, _EPS)
    diff = ua - ub
    val = (diff * diff).sum(-1)
    val = np.where(both_zero[..., 0], 0.0, val)
    # d/da of -2 cos = -2 (ub - ua cos) / |a|
    cos = (ua * ub).sum(-1, keepdims=True)
    ga = -2.0 * (ub - ua * cos) / np.maximum(na, _EPS) if a_live else np.zeros_like(av)
    gb = -2.0 * (ua - ub * cos) / np.maximum(nb, _EPS) if b_live else np.zeros_like(bv)
    if av.ndim == 1:
        val = float(val)
    return val, ga, gb


def f_ce(a, b):
    return f_ce_grad(a, b)[0]


def f_ce_grad(a, b):
    """-sum softmax(b) * log softmax(a); the target ``b`` never gets a gradient."""
    av, a_live = _unwrap(a)
    bv, _ = _unwrap(b)
    pb = softmax(bv)
    logpa = _log_softmax(av)
    val = -(pb * logpa).sum(-1)
    ga = (np.exp(logpa) - pb) if a_live else np.zeros_like(av)
    if av.ndim == 1:
        val = float(val)
    return val, ga, np.zeros_like(bv)


def nll_grad(logits: np.ndarray, labels: np.ndarray):
    """Categorical negative log-likelihood per row and its logit gradient."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[-1]:
        raise ValueError("action label out of range")
    logp = _log_softmax(logits)
    rows = np.arange(len(labels))
    val = -logp[rows, labels]
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    return val, g


def infonce_grad(psi, phi, *, symmetric: bool = False, scale: float = 1.0):
    """InfoNCE with in-batch negatives and inner-product critic.

    Positives sit on the diagonal of ``scale * psi @ phi.T``. The symmetric
    form averages the row-wise and column-wise cross-entropies. Returns
    ``(loss, dpsi, dphi)`` for the batch-mean loss.
    """
    psi = np.asarray(psi)
    phi = np.asarray(phi)
    n = psi.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    if phi.shape != psi.shape:
        raise DimensionError("psi and phi batches differ in shape")
    logits = scale * (psi @ phi.T)
    idx = np.arange(n)
    lr = _log_softmax(logits)
    loss = -lr[idx, idx].mean()
    glog = np.exp(lr)
    glog[idx, idx] -= 1.0
    glog /= n
    if symmetric:
        lc = _log_softmax(logits.T)
        gc = np.exp(lc)
        gc[idx, idx] -= 1.0
        gc /= n
        loss = 0.5 * (loss - lc[idx, idx].mean())
        glog = 0.5 * (glog + gc.T)
    glog *= scale
    return float(loss), glog @ phi, glog.T @ psi


def infonce_loss(psi, phi, symmetric: bool = False, scale: float = 1.0) -> float:
    return infonce_grad(psi, phi, symmetric=symmetric, scale=scale)[0]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    zero = denom <= _EPS
    if np.any(zero):
        warning_counts["cosine_zero"] += int(np.sum(zero))
    out = (a * b).sum(-1) / np.where(zero, 1.0, denom)
    return np.clip(np.where(zero, 0.0, out), -1.0, 1.0)


# -- EMA targets ----------------------------------------------------------


@dataclass
class EmaTarget:
    params: list
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise DomainError(f"tau must lie in [0, 1], got {self.tau}")


def ema_update(target: EmaTarget, online: list) -> EmaTarget:
    """target <- tau * online + (1 - tau) * target."""
    if len(online) != len(target.params) or any(
        o.shape != t.shape for o, t in zip(online, target.params)
    ):
        raise DimensionError("online and target parameter shapes differ")
    tau = target.tau
    if tau == 1.0:
        new = [o.copy() for o in online]
    elif tau == 0.0:
        new = target.params
    else:
        new = [tau * o + (1.0 - tau) * t for o, t in zip(online, target.params)]
    return EmaTarget(new, tau)


# -- Adam -----------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list, **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(state: AdamState, params: list, grads: list):
    """Bias-corrected Adam. Updates ``params`` and ``state`` in place and returns both."""
    if len(grads) != len(params):
        raise DimensionError("grads and params differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise DimensionError(f"gradient {i} has shape {g.shape}, param {params[i].shape}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient in tensor {i} ({bad} entries, step {state.t + 1})")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_norm(grads) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


# -- checkpoints ----------------------------------------------------------

MAGIC = b"SUCREP-CKPT\x00"
VERSION = 1


def save_checkpoint(path, tensors: dict, descriptor: dict) -> None:
    """Versioned container: magic, version, JSON header, raw little-endian f8 payloads."""
    names = list(tensors)
    header = {
        "descriptor": descriptor,
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(head)))
    buf.write(head)
    for n in names:
        buf.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ArtifactError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    if version != VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(raw[off:off + hlen])
    off += hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise ArtifactError(f"{path}: trailing bytes in checkpoint")
    return tensors, header["descriptor"]
