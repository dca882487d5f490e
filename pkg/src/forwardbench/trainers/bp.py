"""End-to-end backpropagation baseline with an explicit backward pass."""
from __future__ import annotations

import numpy as np

from ..core import AdamWState, adamw_step, softmax_cross_entropy
from ..data import DataSplits
from ..models import (
    ACTIVATIONS,
    CascadeSpec,
    MlpSpec,
    ModelParams,
    block_backward,
    block_forward,
    build_cnn,
    build_mlp,
    cnn_logits,
    flops_forward,
    forward_collect,
    mlp_logits,
)
from ..search import EarlyStopper
from ..telemetry import Telemetry
from .common import (
    RunResult,
    TrainConfig,
    accuracy,
    batched,
    check_finite,
    finish,
    minibatches,
    start_telemetry,
    train_rng,
)


def bp_gradients(params: ModelParams, x: np.ndarray, y: np.ndarray, activation: str = "relu"):
    """Mean CE loss of an MLP and its gradients, layer by layer from stored activations."""
    _, act_grad = ACTIVATIONS[activation]
    fwd = forward_collect(params, x, activation)
    loss, dz = softmax_cross_entropy(fwd.post[-1], y)
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        a_in = x if i == 0 else fwd.post[i - 1]
        grads[i] = {"W": a_in.T @ dz, "b": dz.sum(axis=0)}
        if i:
            dz = (dz @ params[i]["W"].T) * act_grad(fwd.pre[i - 1])
    return loss, grads


def cascade_bp_gradients(spec: CascadeSpec, params: ModelParams, x: np.ndarray, y: np.ndarray):
    """Same for a block cascade with a single dense head (the CaFo BP baseline)."""
    h = x.reshape(len(x), *spec.input_shape)
    caches = []
    for blk, p in zip(spec.blocks, params.layers):
        h, cache = block_forward(blk, p, h, keep_cache=True)
        caches.append(cache)
    feat = h.reshape(len(h), -1)
    head = params[len(spec.blocks)]
    loss, dlogits = softmax_cross_entropy(feat @ head["W"] + head["b"], y)
    grads = [None] * len(params)
    grads[-1] = {"W": feat.T @ dlogits, "b": dlogits.sum(axis=0)}
    d = (dlogits @ head["W"].T).reshape(h.shape)
    for i in range(len(spec.blocks) - 1, -1, -1):
        d, grads[i] = block_backward(spec.blocks[i], params[i], d, caches[i], need_dx=i > 0)
    return loss, grads


def predict_bp(params: ModelParams, inputs: np.ndarray, spec=None) -> np.ndarray:
    """Argmax of the logits; ``np.argmax`` resolves ties to the lowest class."""
    if isinstance(spec, CascadeSpec):
        logits = batched(lambda xb: cnn_logits(spec, params, xb), inputs)
    else:
        act = spec.activation if isinstance(spec, MlpSpec) else "relu"
        logits = batched(lambda xb: mlp_logits(params, xb, act), inputs)
    return logits.argmax(axis=-1)


class BpModel:
    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    def predict(self, inputs):
        return predict_bp(self.params, inputs, self.spec)


def train_bp(spec, data: DataSplits, config: TrainConfig, telemetry: Telemetry | None = None,
             dtype=np.float32) -> RunResult:
    """Minibatch AdamW on the global CE loss; best-validation checkpoint kept."""
    is_cascade = isinstance(spec, CascadeSpec)
    if spec.num_classes != data.num_classes:
        raise ValueError("output width must equal the number of classes")
    tel = start_telemetry(telemetry)
    init_rng, order_rng = train_rng(config.seed)
    params = (build_cnn(spec, init_rng, dtype) if is_cascade else build_mlp(spec, init_rng, dtype))
    layer_states = [AdamWState.for_params(p, config.lr, config.weight_decay) for p in params]

    def grads_of(xb, yb):
        if is_cascade:
            return cascade_bp_gradients(spec, params, xb, yb)
        return bp_gradients(params, xb, yb, spec.activation)

    train, val = data.train, data.val
    result = RunResult("bp", params)
    stopper = EarlyStopper(config.policy())
    tel.mark("train")
    for epoch in range(config.max_epochs):
        losses = []
        for idx in minibatches(len(train), config.batch_size, order_rng):
            loss, grads = grads_of(train.inputs[idx], train.labels[idx])
            check_finite(loss, f"bp epoch {epoch + 1}", result)
            for p, g, st in zip(params, grads, layer_states):
                adamw_step(p, g, st)
            losses.append(loss * len(idx))
        tr_loss = float(np.sum(losses) / len(train))
        va = accuracy(predict_bp(params, val.inputs, spec), val.labels)
        result.train_loss.append(tr_loss)
        result.val_acc.append(va)
        result.logs.append({"epoch": epoch + 1, "phase": "train", "train_loss": tr_loss, "val_acc": va})
        if stopper.update(va, params.copy):
            break

    best = stopper.best_snapshot
    result.params = best
    result.model = BpModel(spec, best)
    result.best_epoch = stopper.best_index
    result.best_val_acc = stopper.best_value
    finish(result, tel, flops_forward(spec))
    result.test_acc = accuracy(result.model.predict(data.test.inputs), data.test.labels)
    return result
