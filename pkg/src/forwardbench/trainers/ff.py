"""Forward-Forward: layer-local goodness objective on positive/negative passes.

Positive inputs carry the true label in their first ``num_classes``
features, negative inputs a wrong one. Each hidden layer raises the goodness
of positive activity above the threshold and pushes negative activity below
it. The next layer sees the detached, L2-normalized activations, so no
gradient crosses a layer boundary. Inference overlays every candidate label
and picks the one with the largest accumulated goodness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import AdamWState, adamw_step, derive_seed, l2_normalize, make_rng, relu, relu_grad, sigmoid, softplus
from ..data import DataSplits, overlay_label, sample_wrong_labels
from ..models import MlpSpec, ModelParams, build_mlp, flops_forward
from ..search import EarlyStopper
from ..telemetry import Telemetry
from .common import RunResult, TrainConfig, accuracy, check_finite, finish, minibatches, start_telemetry, train_rng


@dataclass(frozen=True)
class GoodnessConfig:
    aggregation: str = "mean"  # "mean" | "sum" of squared activations
    theta: float = 2.0
    include_first_layer: bool = False

    def __post_init__(self):
        if self.aggregation not in ("mean", "sum"):
            raise ValueError("aggregation must be 'mean' or 'sum'")
        if not np.isfinite(self.theta):
            raise ValueError("theta must be finite")


def goodness(activations: np.ndarray, config: GoodnessConfig = GoodnessConfig()):
    """Mean (default) or sum of squared activations, per row."""
    a = np.asarray(activations)
    sq = a * a
    g = sq.mean(axis=-1) if config.aggregation == "mean" else sq.sum(axis=-1)
    return float(g) if a.ndim == 1 else g


def ff_layer_loss(g, theta: float, positive: bool):
    """Logistic loss on ``g - theta`` and its derivative w.r.t. ``g``.

    positive: softplus(-(g - theta)); negative: softplus(g - theta).
    """
    d = np.asarray(g) - theta
    if positive:
        return softplus(-d), -sigmoid(-d)
    return softplus(d), sigmoid(d)


def _dgood_dh(h, config: GoodnessConfig):
    return 2 * h / h.shape[-1] if config.aggregation == "mean" else 2 * h


def ff_layer_gradients(layer: dict, x_pos: np.ndarray, x_neg: np.ndarray, config: GoodnessConfig):
    """Local loss of one layer on a positive and a negative batch.

    The loss is the mean of the per-sample logistic losses over both batches.
    Returns ``(loss, grads, h_pos, h_neg)``.
    """
    W, b = layer["W"], layer["b"]
    n = len(x_pos) + len(x_neg)
    grads = {"W": np.zeros_like(W), "b": np.zeros_like(b)}
    total = 0.0
    outs = []
    for x, positive in ((x_pos, True), (x_neg, False)):
        z = x @ W + b
        h = relu(z)
        g = goodness(h, config)
        loss, dl_dg = ff_layer_loss(g, config.theta, positive)
        total += float(np.sum(loss))
        dz = (dl_dg / n)[:, None] * _dgood_dh(h, config) * relu_grad(z)
        grads["W"] += x.T @ dz
        grads["b"] += dz.sum(axis=0)
        outs.append(h)
    return total / n, grads, outs[0], outs[1]


def normalize_rows(h: np.ndarray) -> np.ndarray:
    return l2_normalize(h)[0]


class FfModel:
    def __init__(self, layers: ModelParams, num_classes: int, config: GoodnessConfig, intensity: float):
        self.layers = layers
        self.num_classes = num_classes
        self.config = config
        self.intensity = intensity

    def layer_activations(self, x: np.ndarray) -> list:
        acts = []
        for i, layer in enumerate(self.layers):
            if i:
                x = normalize_rows(x)
            x = relu(x @ layer["W"] + layer["b"])
            acts.append(x)
        return acts

    def label_goodness(self, inputs: np.ndarray) -> np.ndarray:
        """``(N, num_classes)`` accumulated goodness for every candidate label."""
        return predict_goodness(self.layers, inputs, self.num_classes, self.config, self.intensity)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return predict_ff(self.layers, inputs, self.num_classes, self.config, self.intensity)


def _included_layers(n_layers: int, config: GoodnessConfig) -> range:
    if config.include_first_layer or n_layers == 1:
        return range(n_layers)
    return range(1, n_layers)


def predict_goodness(layers, inputs, num_classes, config=GoodnessConfig(), intensity=1.0, batch=1000):
    inputs = np.atleast_2d(inputs)
    model = FfModel(layers, num_classes, config, intensity)
    used = _included_layers(len(layers), config)
    out = np.zeros((len(inputs), num_classes), dtype=np.float64)
    for s in range(0, len(inputs), batch):
        xb = inputs[s:s + batch]
        for c in range(num_classes):
            acts = model.layer_activations(overlay_label(xb, np.full(len(xb), c), num_classes, intensity))
            out[s:s + batch, c] = sum(goodness(acts[i], config) for i in used)
    return out


def predict_ff(layers, inputs, num_classes, config=GoodnessConfig(), intensity=1.0):
    """Label with the highest accumulated goodness; ties go to the lowest class."""
    single = np.ndim(inputs) == 1
    pred = predict_goodness(layers, inputs, num_classes, config, intensity).argmax(axis=1)
    return int(pred[0]) if single else pred


def goodness_stats(model: FfModel, inputs, labels, rng) -> list:
    """Mean positive/negative goodness per layer on ``inputs``."""
    pos = overlay_label(inputs, labels, model.num_classes, model.intensity)
    neg = overlay_label(inputs, sample_wrong_labels(labels, model.num_classes, rng), model.num_classes, model.intensity)
    ap, an = model.layer_activations(pos), model.layer_activations(neg)
    return [{"layer": i + 1,
             "mean_pos_goodness": float(goodness(p, model.config).mean()),
             "mean_neg_goodness": float(goodness(n, model.config).mean())}
            for i, (p, n) in enumerate(zip(ap, an))]


def goodness_config_from(config: TrainConfig) -> GoodnessConfig:
    ex = config.extras
    return GoodnessConfig(ex.get("aggregation", "mean"), float(ex.get("theta", 2.0)),
                          bool(ex.get("include_first_layer", False)))


def train_ff(spec: MlpSpec, data: DataSplits, config: TrainConfig, telemetry: Telemetry | None = None,
             dtype=np.float32) -> RunResult:
    """Train the hidden layers of ``spec`` with Forward-Forward.

    ``spec.widths[-1]`` is the class count; FF has no output layer, so only
    the hidden layers are built. ``extras``: ``theta``, ``aggregation``,
    ``include_first_layer``, ``overlay_intensity``, ``schedule``
    ("simultaneous" or "greedy").
    """
    if not isinstance(spec, MlpSpec) or len(spec.widths) < 3:
        raise ValueError("FF needs an MLP with at least one hidden layer")
    num_classes = spec.num_classes
    if num_classes != data.num_classes or num_classes > spec.widths[0]:
        raise ValueError("class count must match data and fit in the input features")
    gcfg = goodness_config_from(config)
    schedule = config.extras.get("schedule", "simultaneous")
    tel = start_telemetry(telemetry)
    init_rng, order_rng = train_rng(config.seed)
    label_rng = make_rng(derive_seed(config.seed, 12))
    layers = build_mlp(MlpSpec(spec.widths[:-1], spec.activation), init_rng, dtype)
    intensity = float(config.extras.get("overlay_intensity", float(data.train.inputs.max())))
    states = [AdamWState.for_params(layer, config.lr, config.weight_decay) for layer in layers]

    train, val = data.train, data.val
    result = RunResult("ff", layers)
    model = FfModel(layers, num_classes, gcfg, intensity)
    pos_all = overlay_label(train.inputs, train.labels, num_classes, intensity)

    def run_epochs(active: list, stopper: EarlyStopper, tag: str, budget: int, evaluator: FfModel):
        for epoch in range(budget):
            wrong = sample_wrong_labels(train.labels, num_classes, label_rng)
            neg_all = overlay_label(train.inputs, wrong, num_classes, intensity)
            n_layers = len(layers)
            loss_sum = np.zeros(n_layers)
            gp = np.zeros(n_layers)
            gn = np.zeros(n_layers)
            for idx in minibatches(len(train), config.batch_size, order_rng):
                xp, xn = pos_all[idx], neg_all[idx]
                for i in range(max(active) + 1):
                    if i:
                        xp, xn = normalize_rows(xp), normalize_rows(xn)
                    if i in active:
                        loss, grads, hp, hn = ff_layer_gradients(layers[i], xp, xn, gcfg)
                        check_finite(loss, f"ff layer {i + 1}", result)
                        adamw_step(layers[i], grads, states[i])
                        loss_sum[i] += loss * len(idx)
                    else:
                        hp = relu(xp @ layers[i]["W"] + layers[i]["b"])
                        hn = relu(xn @ layers[i]["W"] + layers[i]["b"])
                    gp[i] += goodness(hp, gcfg).sum()
                    gn[i] += goodness(hn, gcfg).sum()
                    xp, xn = hp, hn
            n = len(train)
            tr_loss = float(np.mean(loss_sum[active]) / n)
            va = accuracy(evaluator.predict(val.inputs), val.labels)
            result.train_loss.append(tr_loss)
            result.val_acc.append(va)
            result.logs.append({
                "epoch": len(result.val_acc), "phase": tag, "train_loss": tr_loss, "val_acc": va,
                "goodness": [{"layer": i + 1, "mean_pos_goodness": gp[i] / n, "mean_neg_goodness": gn[i] / n}
                             for i in active],
            })
            if stopper.update(va, layers.copy):
                break

    if schedule == "greedy":
        # one layer at a time, each with its own early-stopping window
        for i in range(len(layers)):
            tel.mark("ff_layer", active_layer=i + 1)
            stopper = EarlyStopper(config.policy())
            # validate on the stack trained so far; untrained layers above carry no signal
            partial = FfModel(ModelParams(layers.layers[:i + 1]), num_classes, gcfg, intensity)
            run_epochs([i], stopper, f"layer_{i + 1}", config.max_epochs, partial)
            best = stopper.best_snapshot
            layers[i].update({k: v.copy() for k, v in best[i].items()})
            states[i] = None
        best_val = stopper.best_value
        best_index = len(result.val_acc) - len(stopper.history) + stopper.best_index
    else:
        tel.mark("train")
        stopper = EarlyStopper(config.policy())
        run_epochs(list(range(len(layers))), stopper, "train", config.max_epochs, model)
        for dst, src in zip(layers, stopper.best_snapshot):
            dst.update(src)
        best_val = stopper.best_value
        best_index = stopper.best_index

    result.params = layers
    result.model = model
    result.best_epoch = best_index
    result.best_val_acc = best_val
    # one forward pass of the hidden stack; inference repeats it per candidate label
    finish(result, tel, flops_forward(MlpSpec(spec.widths[:-1])))
    result.test_acc = accuracy(model.predict(data.test.inputs), data.test.labels)
    return result
