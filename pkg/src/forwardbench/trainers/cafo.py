"""Cascaded Forward: a chain of blocks, each read out by its own linear predictor.

Rand mode keeps the randomly initialized blocks frozen and fits only the
predictors. DFA mode first pretrains the blocks with Direct Feedback
Alignment against a temporary linear head, then freezes them and fits the
predictors the same way.
"""
from __future__ import annotations

import numpy as np

from ..core import AdamWState, adamw_step, derive_seed, kaiming_init, make_rng, softmax, softmax_cross_entropy
from ..data import DataSplits
from ..models import CascadeSpec, ConvBlockSpec, ModelParams, block_backward, block_forward, build_block, flops_forward
from ..search import EarlyStopper
from ..telemetry import Telemetry
from .common import RunResult, TrainConfig, accuracy, check_finite, finish, minibatches, start_telemetry, train_rng


class CafoCascade:
    def __init__(self, spec: CascadeSpec, blocks: ModelParams, predictors: ModelParams,
                 mode: str = "rand", feedback: list | None = None, aggregation: str = "mean"):
        if len(blocks) != len(spec.blocks) or len(predictors) != len(spec.blocks):
            raise ValueError("one parameter set and one predictor per block required")
        for w, p in zip(spec.feature_widths(), predictors):
            if p["W"].shape != (w, spec.num_classes):
                raise ValueError("predictor input width must equal the flattened block output")
        self.spec = spec
        self.blocks = blocks
        self.predictors = predictors
        self.mode = mode
        self.feedback = feedback
        self.aggregation = aggregation

    def features(self, inputs: np.ndarray, batch: int = 500) -> list:
        """Flattened output of every block (computed in chunks)."""
        chunks = []
        for s in range(0, len(inputs), batch):
            h = inputs[s:s + batch].reshape(-1, *self.spec.input_shape)
            out = []
            for blk, p in zip(self.spec.blocks, self.blocks):
                h = block_forward(blk, p, h)
                out.append(h.reshape(len(h), -1))
            chunks.append(out)
        if not chunks:
            return [np.zeros((0, w), np.float32) for w in self.spec.feature_widths()]
        return [np.concatenate([c[i] for c in chunks]) for i in range(len(self.spec.blocks))]

    def block_probs(self, feats: list) -> list:
        return [softmax(f @ p["W"] + p["b"]) for f, p in zip(feats, self.predictors)]

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return predict_cafo(self, inputs, self.aggregation)


def build_cascade(spec: CascadeSpec, rng, mode: str = "rand", dtype=np.float32) -> CafoCascade:
    blocks = ModelParams([build_block(b, rng, dtype) for b in spec.blocks])
    predictors = ModelParams([{"W": kaiming_init((w, spec.num_classes), rng, dtype=dtype),
                               "b": np.zeros(spec.num_classes, dtype)} for w in spec.feature_widths()])
    feedback = init_feedback(spec, rng, dtype) if mode == "dfa" else None
    return CafoCascade(spec, blocks, predictors, mode, feedback)


def init_feedback(spec: CascadeSpec, rng, dtype=np.float32) -> list:
    """Fixed DFA matrices ``B_l`` of shape ``(classes, block_out_features)``, U(-1/sqrt(C), 1/sqrt(C))."""
    bound = 1.0 / np.sqrt(spec.num_classes)
    return [rng.uniform(-bound, bound, size=(spec.num_classes, w)).astype(dtype) for w in spec.feature_widths()]


def aggregate_probs(probs: list, aggregation: str = "mean") -> np.ndarray:
    if aggregation == "mean":
        return np.mean(probs, axis=0)
    if aggregation == "last":
        return probs[-1]
    raise ValueError(f"unknown aggregation {aggregation!r}")


def predict_cafo(cascade: CafoCascade, inputs: np.ndarray, aggregation: str = "mean") -> np.ndarray:
    """Mean of per-block softmax outputs (or last block only), argmax with lowest-index ties."""
    probs = cascade.block_probs(cascade.features(inputs))
    return aggregate_probs(probs, aggregation).argmax(axis=-1)


def predictor_gradients(predictor: dict, feats: np.ndarray, labels: np.ndarray):
    """Mean CE of one linear predictor on detached block features."""
    loss, dlogits = softmax_cross_entropy(feats @ predictor["W"] + predictor["b"], labels)
    return loss, {"W": feats.T @ dlogits, "b": dlogits.sum(axis=0)}


def output_error(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``e = softmax(logits) - onehot(labels)``, averaged over the batch."""
    e = softmax(logits)
    e[np.arange(len(labels)), labels] -= 1.0
    return e / len(labels)


def dfa_block_gradients(block, params: dict, cache, feedback: np.ndarray, error: np.ndarray) -> dict:
    """DFA update for one block from only ``B_l``, the output error and block-local state.

    The projected error ``e @ B_l`` stands in for the gradient at the block
    output; it is routed through the block's own pooling and scaled by the
    activation derivative at the block's pre-activation before forming the
    weight gradient. No other layer's weights are read.
    """
    projected = error @ feedback
    if isinstance(block, ConvBlockSpec):
        c, h, w = cache.a.shape[1:]
        if block.pool:
            h, w = h // block.pool_size, w // block.pool_size
        projected = projected.reshape(len(error), c, h, w)
    _, grads = block_backward(block, params, projected, cache, need_dx=False)
    return grads


def dfa_step_gradients(spec: CascadeSpec, blocks: ModelParams, head: dict, feedback: list,
                       x: np.ndarray, labels: np.ndarray):
    """Loss, per-block DFA gradients and the head's true gradient for one batch."""
    h = x.reshape(len(x), *spec.input_shape)
    caches = []
    for blk, p in zip(spec.blocks, blocks):
        h, cache = block_forward(blk, p, h, keep_cache=True)
        caches.append(cache)
    feat = h.reshape(len(h), -1)
    logits = feat @ head["W"] + head["b"]
    loss, _ = softmax_cross_entropy(logits, labels)
    e = output_error(logits, labels)
    head_grads = {"W": feat.T @ e, "b": e.sum(axis=0)}
    block_grads = [dfa_block_gradients(blk, p, c, B, e)
                   for blk, p, c, B in zip(spec.blocks, blocks, caches, feedback)]
    return loss, block_grads, head_grads


def _as_cascade(spec_or_cascade, config: TrainConfig, mode: str, dtype) -> CafoCascade:
    if isinstance(spec_or_cascade, CafoCascade):
        spec_or_cascade.mode = mode
        if mode == "dfa" and spec_or_cascade.feedback is None:
            spec_or_cascade.feedback = init_feedback(spec_or_cascade.spec, make_rng(derive_seed(config.seed, 13)), dtype)
        return spec_or_cascade
    init_rng, _ = train_rng(config.seed)
    cascade = build_cascade(spec_or_cascade, init_rng, mode, dtype)
    cascade.aggregation = config.extras.get("aggregation", "mean")
    return cascade


def _fit_predictors(cascade: CafoCascade, data: DataSplits, config: TrainConfig, result: RunResult,
                    order_rng) -> EarlyStopper:
    train_feats = cascade.features(data.train.inputs)
    val_feats = cascade.features(data.val.inputs)
    y, yv = data.train.labels, data.val.labels
    states = [AdamWState.for_params(p, config.lr, config.weight_decay) for p in cascade.predictors]
    stopper = EarlyStopper(config.policy())
    for epoch in range(config.max_epochs):
        loss_sum = 0.0
        for idx in minibatches(len(y), config.batch_size, order_rng):
            for f, p, st in zip(train_feats, cascade.predictors, states):
                loss, grads = predictor_gradients(p, f[idx], y[idx])
                check_finite(loss, "predictor_fit", result)
                adamw_step(p, grads, st)
                loss_sum += loss * len(idx)
        tr_loss = loss_sum / (len(y) * len(states))
        va = accuracy(aggregate_probs(cascade.block_probs(val_feats), cascade.aggregation).argmax(-1), yv)
        result.train_loss.append(tr_loss)
        result.val_acc.append(va)
        result.logs.append({"epoch": epoch + 1, "phase": "predictor_fit", "train_loss": tr_loss, "val_acc": va})
        if stopper.update(va, cascade.predictors.copy):
            break
    for dst, src in zip(cascade.predictors, stopper.best_snapshot):
        dst.update(src)
    return stopper


def _finish(cascade, stopper, result, tel, data):
    result.params = ModelParams(list(cascade.blocks) + list(cascade.predictors))
    result.model = cascade
    result.best_epoch = stopper.best_index
    result.best_val_acc = stopper.best_value
    flops = flops_forward(cascade.spec) + 2 * cascade.spec.num_classes * sum(cascade.spec.feature_widths()[:-1])
    finish(result, tel, flops)
    result.test_acc = accuracy(cascade.predict(data.test.inputs), data.test.labels)
    return result


def train_cafo_rand(cascade, data: DataSplits, config: TrainConfig, telemetry: Telemetry | None = None,
                    dtype=np.float32) -> RunResult:
    """Fit only the per-block predictors on frozen random block features."""
    cascade = _as_cascade(cascade, config, "rand", dtype)
    tel = start_telemetry(telemetry)
    _, order_rng = train_rng(config.seed)
    result = RunResult("cafo_rand", None)
    tel.mark("predictor_fit")
    stopper = _fit_predictors(cascade, data, config, result, order_rng)
    return _finish(cascade, stopper, result, tel, data)


def train_cafo_dfa(cascade, data: DataSplits, config: TrainConfig, telemetry: Telemetry | None = None,
                   dtype=np.float32) -> RunResult:
    """DFA block pretraining (``extras["dfa_epochs"]``, default 5), then predictor fitting.

    ``extras["dfa_lr"]`` sets the pretraining learning rate (defaults to ``lr``).
    """
    cascade = _as_cascade(cascade, config, "dfa", dtype)
    spec = cascade.spec
    tel = start_telemetry(telemetry)
    _, order_rng = train_rng(config.seed)
    head_rng = make_rng(derive_seed(config.seed, 14))
    head = {"W": kaiming_init((spec.feature_widths()[-1], spec.num_classes), head_rng, dtype=dtype),
            "b": np.zeros(spec.num_classes, dtype)}
    dfa_epochs = int(config.extras.get("dfa_epochs", 5))
    dfa_lr = float(config.extras.get("dfa_lr", config.lr))
    block_states = [AdamWState.for_params(p, dfa_lr, config.weight_decay) for p in cascade.blocks]
    head_state = AdamWState.for_params(head, dfa_lr, config.weight_decay)
    result = RunResult("cafo_dfa", None)
    train, val = data.train, data.val

    tel.mark("dfa_pretrain")
    for epoch in range(dfa_epochs):
        loss_sum = 0.0
        for idx in minibatches(len(train), config.batch_size, order_rng):
            loss, block_grads, head_grads = dfa_step_gradients(spec, cascade.blocks, head, cascade.feedback,
                                                               train.inputs[idx], train.labels[idx])
            check_finite(loss, "dfa_pretrain", result)
            for p, g, st in zip(cascade.blocks, block_grads, block_states):
                adamw_step(p, g, st)
            adamw_step(head, head_grads, head_state)
            loss_sum += loss * len(idx)
        # predictors are untouched here; accuracy moves only because block features do
        va = accuracy(cascade.predict(val.inputs), val.labels)
        result.logs.append({"epoch": epoch + 1, "phase": "dfa_pretrain",
                            "train_loss": loss_sum / len(train), "val_acc": va})
    del block_states, head_state, head

    tel.mark("predictor_fit")
    stopper = _fit_predictors(cascade, data, config, result, order_rng)
    return _finish(cascade, stopper, result, tel, data)
