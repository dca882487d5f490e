"""Dense kernels, losses, AdamW and seeded RNG shared by every trainer.

Arrays are plain ``numpy.ndarray``. Training runs in float32; the test
oracles re-evaluate in float64. Batched functions treat the last axis as the
feature/class axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are bit-identical across platforms for a given seed
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a (seed, key...) path, stable across runs."""
    ss = np.random.SeedSequence([seed, *keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if z.shape[-1] < 1:
        raise DimensionError("softmax needs at least one entry")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes")
    return labels


def cross_entropy(probabilities: np.ndarray, label) -> float | np.ndarray:
    """``-ln p[label]`` for a probability vector (or one per row)."""
    p = np.asarray(probabilities)
    labels = _check_labels(label, p.shape[-1])
    if p.ndim == 1:
        return float(-np.log(p[labels]))
    return -np.log(p[np.arange(p.shape[0]), labels])


def cross_entropy_grad(probabilities: np.ndarray, label) -> np.ndarray:
    """Gradient of the CE loss with respect to the logits: ``p - onehot``."""
    p = np.asarray(probabilities)
    labels = _check_labels(label, p.shape[-1])
    g = p.copy()
    if p.ndim == 1:
        g[labels] -= 1.0
    else:
        g[np.arange(p.shape[0]), labels] -= 1.0
    return g


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over a batch of logits plus its gradient w.r.t. the logits."""
    labels = _check_labels(labels, logits.shape[-1])
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return (x > 0).astype(x.dtype)


def l2_normalize(x: np.ndarray, eps: float = 0.0):
    """Scale each row to unit L2 norm.

    Returns ``(normalized, degenerate)`` where ``degenerate`` marks zero-norm
    rows, which are passed through unchanged.
    """
    x = np.asarray(x)
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    degenerate = norm[..., 0] <= 0
    safe = np.where(norm > 0, norm + eps, 1)
    out = x / safe
    if x.ndim == 1:
        return out, bool(degenerate)
    return out, degenerate


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -np.asarray(x)))


def kaiming_init(shape, rng: np.random.Generator, fan_in: int | None = None, dtype=DEFAULT_DTYPE):
    """He-normal draws, std = sqrt(2 / fan_in).

    Dense weights are stored ``(in, out)`` so fan-in defaults to ``shape[0]``;
    conv weights ``(out, in, kh, kw)`` use ``in * kh * kw``.
    """
    shape = tuple(int(s) for s in shape)
    if fan_in is None:
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
    if fan_in <= 0:
        raise ValueError("fan-in must be positive")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float, weight_decay: float = 0.0, **kw) -> "AdamWState":
        state = cls(lr=lr, weight_decay=weight_decay, **kw)
        for k, p in params.items():
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        return state

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """One AdamW update with decoupled weight decay and bias correction.

    Parameters are updated in place (the trainers own them exclusively) and
    the same dict is returned. Keys absent from ``grads`` are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape} for {k!r}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params
