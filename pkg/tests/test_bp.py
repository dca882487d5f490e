import numpy as np
import pytest

from forwardbench import gradcheck
from forwardbench.core import make_rng
from forwardbench.data import DataSplits, LabeledBatch
from forwardbench.models import CascadeSpec, ConvBlockSpec, MlpSpec, build_mlp, mlp_logits
from forwardbench.search import EarlyStopPolicy
from forwardbench.trainers import bp as bp_module
from forwardbench.trainers import TrainConfig, TrainingDiverged, predict_bp, train_bp
from forwardbench.trainers.common import accuracy, train_rng
from oracles import logistic_regression_ref


def _same(batch):
    return DataSplits(batch, batch, batch)


def test_two_point_separable_single_layer():
    b = LabeledBatch(np.array([[1.0, 0.5], [-1.0, -0.5]], np.float32), np.array([0, 1]), 2)
    assert logistic_regression_ref(b.inputs, b.labels, 2) == 1.0
    cfg = TrainConfig("bp", lr=0.05, batch_size=2, max_epochs=100, early_stop=EarlyStopPolicy(100, 0, 100))
    res = train_bp(MlpSpec((2, 2)), _same(b), cfg)
    assert accuracy(predict_bp(res.params, b.inputs, MlpSpec((2, 2))), b.labels) == 1.0


def test_zero_learning_rate_keeps_init(blobs):
    spec = MlpSpec((20, 16, 4))
    res = train_bp(spec, blobs, TrainConfig("bp", lr=0.0, max_epochs=3, seed=4))
    init = build_mlp(spec, train_rng(4)[0])
    assert res.params.equal(init)
    assert res.val_acc[0] == accuracy(predict_bp(init, blobs.val.inputs, spec), blobs.val.labels)


def test_gradients_match_finite_differences():
    assert gradcheck.check_bp_mlp(0).ok
    assert gradcheck.check_bp_cnn(1).ok


def test_predict_tie_and_onehot():
    spec = MlpSpec((3, 4))
    zero = build_mlp(spec, make_rng(0))
    for layer in zero:
        layer["W"][:] = 0
    assert predict_bp(zero, np.ones((2, 3), np.float32), spec).tolist() == [0, 0]
    zero[0]["b"][2] = 1.0
    assert predict_bp(zero, np.ones((1, 3), np.float32), spec).tolist() == [2]


def test_predict_agrees_with_64bit():
    spec = MlpSpec((10, 32, 5))
    p = build_mlp(spec, make_rng(1))
    x = make_rng(2).standard_normal((100, 10)).astype(np.float32)
    ref = mlp_logits(p.astype(np.float64), x.astype(np.float64)).argmax(1)
    assert np.mean(predict_bp(p, x, spec) == ref) >= 0.99


def test_deterministic_given_seed(blobs):
    spec = MlpSpec((20, 16, 4))
    cfg = TrainConfig("bp", lr=1e-2, max_epochs=4, seed=9)
    a, b = train_bp(spec, blobs, cfg), train_bp(spec, blobs, cfg)
    assert a.train_loss == b.train_loss and a.val_acc == b.val_acc
    assert a.params.equal(b.params)


def test_memorizes_tiny_set():
    rng = make_rng(0)
    b = LabeledBatch(rng.standard_normal((32, 8)).astype(np.float32), rng.integers(0, 4, 32), 4)
    cfg = TrainConfig("bp", lr=1e-2, batch_size=32, max_epochs=300, early_stop=EarlyStopPolicy(1000, 0, 300))
    res = train_bp(MlpSpec((8, 128, 4)), _same(b), cfg)
    assert res.train_loss[-1] < 0.01


def test_best_checkpoint_is_best_validation_epoch(blobs):
    res = train_bp(MlpSpec((20, 16, 4)), blobs, TrainConfig("bp", lr=3e-2, max_epochs=8, seed=1))
    assert res.best_val_acc == max(res.val_acc)
    assert res.val_acc.index(max(res.val_acc)) == res.best_epoch
    assert accuracy(res.model.predict(blobs.val.inputs), blobs.val.labels) == res.best_val_acc
    assert len(res.val_acc) <= 8


def test_cnn_baseline_learns(image_blobs):
    spec = CascadeSpec((1, 8, 8), 4, (ConvBlockSpec(1, 4), ConvBlockSpec(4, 8)))
    res = train_bp(spec, image_blobs, TrainConfig("bp", lr=1e-2, max_epochs=5, seed=0))
    assert res.best_val_acc > 0.9


def test_output_width_must_match(blobs):
    with pytest.raises(ValueError):
        train_bp(MlpSpec((20, 3)), blobs, TrainConfig("bp"))


def test_divergence_aborts_with_partial_curves(blobs, monkeypatch):
    real = bp_module.softmax_cross_entropy
    calls = {"n": 0}

    def flaky(logits, labels):
        calls["n"] += 1
        loss, g = real(logits, labels)
        return (float("nan") if calls["n"] > 8 else loss), g

    monkeypatch.setattr(bp_module, "softmax_cross_entropy", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train_bp(MlpSpec((20, 8, 4)), blobs, TrainConfig("bp", batch_size=64, max_epochs=5))
    partial = info.value.partial
    assert partial.status == "diverged" and "non-finite" in partial.diagnostic
    assert len(partial.val_acc) == 2  # 4 batches per epoch: epochs 1-2 completed
