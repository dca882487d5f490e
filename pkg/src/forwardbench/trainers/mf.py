"""Mono-Forward: every layer learns from its own projection-matrix CE loss.

Hidden layer ``l`` computes ``a_l = relu(x_l @ W_l + b_l)`` and class scores
``a_l @ M_l``. Its local loss is the cross entropy of those scores; the
gradient reaches ``W_l``, ``b_l`` and ``M_l`` and stops at the layer input,
which is always a detached copy of the previous layer's output. The output
layer is the closure of the stack: its logits are its scores (identity
projection).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import AdamWState, adamw_step, derive_seed, kaiming_init, make_rng, relu, relu_grad, softmax_cross_entropy
from ..data import DataSplits
from ..models import MlpSpec, ModelParams, build_mlp, flops_forward
from ..search import EarlyStopper
from ..telemetry import Telemetry
from .common import RunResult, TrainConfig, accuracy, check_finite, finish, minibatches, start_telemetry, train_rng


@dataclass(frozen=True)
class MfSchedule:
    mode: str = "sequential"  # "sequential" | "interleaved"
    layer_epochs: tuple | int | None = None  # per-layer budget in sequential mode

    def __post_init__(self):
        if self.mode not in ("sequential", "interleaved"):
            raise ValueError("mode must be 'sequential' or 'interleaved'")
        budgets = self.layer_epochs if isinstance(self.layer_epochs, tuple) else (self.layer_epochs,)
        if self.mode == "sequential" and any(b is not None and b < 1 for b in budgets):
            raise ValueError("per-layer budgets must be >= 1")

    def budget(self, layer: int, default: int) -> int:
        if self.layer_epochs is None:
            return default
        if isinstance(self.layer_epochs, tuple):
            return int(self.layer_epochs[layer])
        return int(self.layer_epochs)


def mf_layer_scores(activation: np.ndarray, projection: np.ndarray) -> np.ndarray:
    if activation.shape[-1] != projection.shape[0]:
        raise ValueError(f"activation width {activation.shape[-1]} != projection rows {projection.shape[0]}")
    return activation @ projection


def is_output_layer(layer: dict) -> bool:
    return "M" not in layer


def layer_forward(layer: dict, x: np.ndarray):
    """``(z, a, scores)`` for one MF layer; the output layer scores its logits."""
    z = x @ layer["W"] + layer["b"]
    if is_output_layer(layer):
        return z, z, z
    a = relu(z)
    return z, a, mf_layer_scores(a, layer["M"])


def mf_local_loss(x_in: np.ndarray, layer: dict, labels: np.ndarray):
    """Local CE of one layer and its gradients w.r.t. that layer's own tensors.

    ``x_in`` is treated as a constant: nothing flows back into it.
    Returns ``(loss, grads, activation)``.
    """
    z, a, scores = layer_forward(layer, x_in)
    loss, ds = softmax_cross_entropy(scores, labels)
    grads = {}
    if is_output_layer(layer):
        dz = ds
    else:
        grads["M"] = a.T @ ds
        dz = (ds @ layer["M"].T) * relu_grad(z)
    grads["W"] = x_in.T @ dz
    grads["b"] = dz.sum(axis=0)
    return loss, grads, a


def layer_scores(layers, x: np.ndarray, upto: int | None = None) -> list:
    scores = []
    n = len(layers) if upto is None else upto
    for layer in list(layers)[:n]:
        _, x, s = layer_forward(layer, x)
        scores.append(s)
    return scores


def aggregate_scores(scores: list, aggregation: str = "sum") -> np.ndarray:
    if aggregation == "sum":
        return np.sum(scores, axis=0)
    if aggregation == "last":
        return scores[-1]
    raise ValueError(f"unknown aggregation {aggregation!r}")


def predict_mf(layers, inputs: np.ndarray, aggregation: str = "sum", upto: int | None = None) -> np.ndarray:
    """Argmax of summed per-layer scores (or the last layer's); lowest index wins ties."""
    single = np.ndim(inputs) == 1
    x = np.atleast_2d(inputs)
    out = []
    for s in range(0, len(x), 1000):
        out.append(aggregate_scores(layer_scores(layers, x[s:s + 1000], upto), aggregation).argmax(axis=-1))
    pred = np.concatenate(out) if out else np.zeros(0, np.int64)
    return int(pred[0]) if single else pred


class MfModel:
    def __init__(self, spec: MlpSpec, layers: ModelParams, aggregation: str = "sum"):
        self.spec = spec
        self.layers = layers
        self.aggregation = aggregation

    def predict(self, inputs, upto=None):
        return predict_mf(self.layers, inputs, self.aggregation, upto)


def build_mf(spec: MlpSpec, rng, dtype=np.float32) -> ModelParams:
    """MLP weights plus a Kaiming-initialized projection for each hidden layer."""
    params = build_mlp(spec, rng, dtype)
    for layer in params.layers[:-1]:
        width = layer["W"].shape[1]
        layer["M"] = kaiming_init((width, spec.num_classes), rng, fan_in=width, dtype=dtype)
    return params


def _forward_features(layer: dict, x: np.ndarray, batch: int = 2000) -> np.ndarray:
    return np.concatenate([layer_forward(layer, x[s:s + batch])[1] for s in range(0, len(x), batch)]) \
        if len(x) else np.zeros((0, layer["W"].shape[1]), x.dtype)


def _scores(layer: dict, x: np.ndarray) -> np.ndarray:
    return layer_forward(layer, x)[2]


def schedule_from(config: TrainConfig) -> MfSchedule:
    ex = config.extras
    budget = ex.get("layer_epochs")
    if isinstance(budget, list):
        budget = tuple(budget)
    return MfSchedule(ex.get("schedule", "sequential"), budget)


def train_mf(spec: MlpSpec, data: DataSplits, config: TrainConfig, telemetry: Telemetry | None = None,
             dtype=np.float32, schedule: MfSchedule | None = None) -> RunResult:
    """Train an MLP layer by layer (sequential) or all layers per batch (interleaved).

    Sequential mode gives each layer its own optimizer state, budget and
    early-stopping window, then restores that layer's best-validation
    weights and freezes it. Detached features of every finished layer are
    kept for the rest of the run (the feature store) so no frozen layer is
    ever evaluated twice on the training or validation set.
    """
    if not isinstance(spec, MlpSpec):
        raise ValueError("MF needs an MLP spec")
    if spec.num_classes != data.num_classes:
        raise ValueError("output width must equal the number of classes")
    schedule = schedule or schedule_from(config)
    aggregation = config.extras.get("aggregation", "sum")
    tel = start_telemetry(telemetry)
    init_rng, order_rng = train_rng(config.seed)
    params = build_mf(spec, init_rng, dtype)
    model = MfModel(spec, params, aggregation)
    result = RunResult("mf", params, model)
    if schedule.mode == "sequential":
        best_index, best_val = _train_sequential(params, data, config, schedule, aggregation, result, tel, order_rng)
    else:
        best_index, best_val = _train_interleaved(params, data, config, aggregation, result, tel, order_rng)
    result.best_epoch = best_index
    result.best_val_acc = best_val
    finish(result, tel, flops_forward(spec) + 2 * spec.num_classes * sum(spec.widths[1:-1]))
    result.test_acc = accuracy(model.predict(data.test.inputs), data.test.labels)
    return result


def _train_sequential(params, data, config, schedule, aggregation, result, tel, order_rng):
    train, val = data.train, data.val
    store_train = [train.inputs]
    store_val = [val.inputs]
    val_scores: list = []
    best_val, best_index = float("nan"), -1
    for li, layer in enumerate(params):
        tel.mark("mf_layer", active_layer=li + 1)
        x_tr, x_va = store_train[-1], store_val[-1]
        # optimizer state for this layer only; released when the phase ends
        state = AdamWState.for_params(layer, config.lr, config.weight_decay)
        stopper = EarlyStopper(config.policy(schedule.budget(li, config.max_epochs)))
        first_epoch = len(result.val_acc)
        for epoch in range(stopper.policy.max_epochs):
            loss_sum = 0.0
            for idx in minibatches(len(train), config.batch_size, order_rng):
                loss, grads, _ = mf_local_loss(x_tr[idx], layer, train.labels[idx])
                check_finite(loss, f"mf layer {li + 1}", result)
                adamw_step(layer, grads, state)
                loss_sum += loss * len(idx)
            tr_loss = loss_sum / len(train)
            cur = _scores(layer, x_va)
            agg = aggregate_scores(val_scores + [cur], aggregation)
            va = accuracy(agg.argmax(axis=-1), val.labels)
            result.train_loss.append(tr_loss)
            result.val_acc.append(va)
            result.logs.append({"epoch": len(result.val_acc), "phase": f"layer_{li + 1}", "active_layer": li + 1,
                                "local_loss": tr_loss, "train_loss": tr_loss, "val_acc": va})
            if stopper.update(va, lambda: {k: v.copy() for k, v in layer.items()}):
                break
        layer.update(stopper.best_snapshot)
        del state
        best_val = stopper.best_value
        best_index = first_epoch + stopper.best_index
        val_scores.append(_scores(layer, x_va))
        if li < len(params) - 1:
            store_train.append(_forward_features(layer, x_tr))
            store_val.append(_forward_features(layer, x_va))
    return best_index, best_val


def _train_interleaved(params, data, config, aggregation, result, tel, order_rng):
    train, val = data.train, data.val
    states = [AdamWState.for_params(layer, config.lr, config.weight_decay) for layer in params]
    stopper = EarlyStopper(config.policy())
    tel.mark("train")
    for epoch in range(config.max_epochs):
        loss_sum = np.zeros(len(params))
        for idx in minibatches(len(train), config.batch_size, order_rng):
            x = train.inputs[idx]
            for li, (layer, st) in enumerate(zip(params, states)):
                loss, grads, a = mf_local_loss(x, layer, train.labels[idx])
                check_finite(loss, f"mf layer {li + 1}", result)
                adamw_step(layer, grads, st)
                loss_sum[li] += loss * len(idx)
                x = a
        per_layer = (loss_sum / len(train)).tolist()
        va = accuracy(predict_mf(params, val.inputs, aggregation), val.labels)
        result.train_loss.append(float(np.mean(per_layer)))
        result.val_acc.append(va)
        result.logs.append({"epoch": epoch + 1, "phase": "train", "local_loss": per_layer,
                            "train_loss": float(np.mean(per_layer)), "val_acc": va})
        if stopper.update(va, params.copy):
            break
    for dst, src in zip(params, stopper.best_snapshot):
        dst.update(src)
    return stopper.best_index, stopper.best_value
