"""Central finite-difference checks for every analytic gradient in the package.

All checks run in float64 on nets of at most ~1k parameters. ``run_all``
backs the ``verify`` subcommand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import kaiming_init, make_rng
from .models import CascadeSpec, ConvBlockSpec, DenseBlockSpec, MlpSpec, build_block, build_cnn, build_mlp

REL_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    rel_error: float
    tol: float = REL_TOL

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def check_tensors(name: str, loss_fn, params: dict, grads: dict, eps: float = 1e-6) -> CheckResult:
    """Worst relative error over every tensor in ``grads``."""
    worst = 0.0
    for k, g in grads.items():
        worst = max(worst, relative_error(g, numeric_grad(loss_fn, params[k], eps)))
    return CheckResult(name, worst)


# -- individual checks -------------------------------------------------------------

def check_bp_mlp(seed: int = 0) -> CheckResult:
    from .trainers.bp import bp_gradients

    rng = make_rng(seed)
    params = build_mlp(MlpSpec((6, 12, 10, 4)), rng, np.float64)
    x, y = rng.standard_normal((5, 6)), rng.integers(0, 4, 5)
    _, grads = bp_gradients(params, x, y)
    worst = 0.0
    for layer, g in zip(params, grads):
        r = check_tensors("", lambda: bp_gradients(params, x, y)[0], layer, g)
        worst = max(worst, r.rel_error)
    return CheckResult("bp full-net (MLP)", worst)


def check_bp_cnn(seed: int = 0) -> CheckResult:
    from .trainers.bp import cascade_bp_gradients

    rng = make_rng(seed)
    spec = CascadeSpec((1, 6, 6), 3, (ConvBlockSpec(1, 2), ConvBlockSpec(2, 3)))
    params = build_cnn(spec, rng, np.float64)
    x, y = rng.standard_normal((3, 36)), rng.integers(0, 3, 3)
    _, grads = cascade_bp_gradients(spec, params, x, y)
    worst = 0.0
    for layer, g in zip(params, grads):
        r = check_tensors("", lambda: cascade_bp_gradients(spec, params, x, y)[0], layer, g)
        worst = max(worst, r.rel_error)
    return CheckResult("bp full-net (conv cascade)", worst)


def check_ff_layer(seed: int = 0) -> CheckResult:
    from .trainers.ff import GoodnessConfig, ff_layer_gradients

    rng = make_rng(seed)
    layer = build_mlp(MlpSpec((8, 16)), rng, np.float64)[0]
    xp, xn = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
    cfg = GoodnessConfig(theta=0.5)
    _, grads, _, _ = ff_layer_gradients(layer, xp, xn, cfg)
    return check_tensors("ff layer loss", lambda: ff_layer_gradients(layer, xp, xn, cfg)[0], layer, grads)


def check_cafo_predictor(seed: int = 0) -> CheckResult:
    from .trainers.cafo import predictor_gradients

    rng = make_rng(seed)
    pred = {"W": rng.standard_normal((12, 5)) * 0.3, "b": rng.standard_normal(5) * 0.1}
    f, y = rng.standard_normal((7, 12)), rng.integers(0, 5, 7)
    _, grads = predictor_gradients(pred, f, y)
    return check_tensors("cafo predictor", lambda: predictor_gradients(pred, f, y)[0], pred, grads)


def check_mf_local(seed: int = 0) -> CheckResult:
    from .trainers.mf import mf_local_loss

    rng = make_rng(seed)
    layer = build_mlp(MlpSpec((8, 20)), rng, np.float64)[0]
    layer["M"] = kaiming_init((20, 4), rng, fan_in=20, dtype=np.float64)
    x, y = rng.standard_normal((6, 8)), rng.integers(0, 4, 6)
    _, grads, _ = mf_local_loss(x, layer, y)
    return check_tensors("mf local loss (W, b, M)", lambda: mf_local_loss(x, layer, y)[0], layer, grads)


def dfa_explicit_oracle(x, W1, b1, W2, b2, B, y):
    """Scalar-loop DFA update for a 1-hidden-layer dense net: (dW1, db1, dW2, db2)."""
    n, d_in = x.shape
    h, c = W1.shape[1], W2.shape[1]
    dW1, db1 = np.zeros_like(W1), np.zeros_like(b1)
    dW2, db2 = np.zeros_like(W2), np.zeros_like(b2)
    for s in range(n):
        z = [sum(x[s, i] * W1[i, j] for i in range(d_in)) + b1[j] for j in range(h)]
        a = [max(v, 0.0) for v in z]
        logits = np.array([sum(a[j] * W2[j, k] for j in range(h)) + b2[k] for k in range(c)])
        p = np.exp(logits - logits.max())
        p /= p.sum()
        e = [(p[k] - (k == y[s])) / n for k in range(c)]
        for j in range(h):
            delta = sum(e[k] * B[k, j] for k in range(c)) * (1.0 if z[j] > 0 else 0.0)
            for i in range(d_in):
                dW1[i, j] += x[s, i] * delta
            db1[j] += delta
            for k in range(c):
                dW2[j, k] += a[j] * e[k]
        for k in range(c):
            db2[k] += e[k]
    return dW1, db1, dW2, db2


def check_dfa(seed: int = 0) -> CheckResult:
    """DFA step on a 2-3-2 net against :func:`dfa_explicit_oracle` (exact up to rounding)."""
    from .trainers.cafo import dfa_step_gradients

    rng = make_rng(seed)
    spec = CascadeSpec((2,), 2, (DenseBlockSpec(2, 3),))
    blocks = [build_block(spec.blocks[0], rng, np.float64)]
    head = {"W": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
    B = rng.uniform(-1, 1, (2, 3))
    x, y = rng.standard_normal((4, 2)), rng.integers(0, 2, 4)
    _, bgrads, hgrads = dfa_step_gradients(spec, blocks, head, [B], x, y)
    ref = dfa_explicit_oracle(x, blocks[0]["W"], blocks[0]["b"], head["W"], head["b"], B, y)
    got = (bgrads[0]["W"], bgrads[0]["b"], hgrads["W"], hgrads["b"])
    return CheckResult("dfa update vs explicit matrix oracle",
                       max(relative_error(g, r) for g, r in zip(got, ref)), tol=1e-12)


CHECKS = (check_bp_mlp, check_bp_cnn, check_ff_layer, check_cafo_predictor, check_mf_local, check_dfa)


def run_all(seeds=(0, 1, 2)) -> list:
    """Every check at every seed; the worst error per check is reported."""
    out = []
    for check in CHECKS:
        results = [check(s) for s in seeds]
        out.append(max(results, key=lambda r: r.rel_error))
    return out
