import math
import weakref

import numpy as np
import pytest

from forwardbench import gradcheck
from forwardbench.core import make_rng
from forwardbench.models import MlpSpec, ModelParams
from forwardbench.search import EarlyStopPolicy
from forwardbench.trainers import TrainConfig, train_mf
from forwardbench.trainers import mf as mf_module
from forwardbench.trainers.common import train_rng
from forwardbench.trainers.mf import (
    MfSchedule,
    aggregate_scores,
    build_mf,
    mf_layer_scores,
    mf_local_loss,
    predict_mf,
)

SPEC = MlpSpec((20, 16, 16, 4))


def _config(**kw):
    base = dict(algorithm="mf", lr=1e-2, batch_size=32, max_epochs=3, seed=0, early_stop=EarlyStopPolicy(10, 0, 3))
    base.update(kw)
    return TrainConfig(**base)


def test_scores_and_local_loss_hand_example():
    a = np.array([[1.0, 0.0]])
    M = np.array([[2.0, 0.0], [0.0, 3.0]])
    np.testing.assert_array_equal(mf_layer_scores(a, M), [[2.0, 0.0]])
    # identity layer with zero bias reproduces a, so the loss is CE of scores [2, 0] at label 0
    layer = {"W": np.eye(2), "b": np.zeros(2), "M": M}
    loss, _, _ = mf_local_loss(a, layer, np.array([0]))
    assert math.isclose(loss, math.log1p(math.exp(-2)), rel_tol=1e-12)
    assert math.isclose(loss, 0.1269, abs_tol=1e-4)


def test_zero_projection_gives_log_classes():
    layer = {"W": make_rng(0).standard_normal((5, 6)), "b": np.zeros(6), "M": np.zeros((6, 7))}
    loss, grads, _ = mf_local_loss(make_rng(1).standard_normal((3, 5)), layer, np.array([0, 3, 6]))
    assert math.isclose(loss, math.log(7), rel_tol=1e-12)
    assert np.all(grads["W"] == 0)


def test_large_score_gap_gives_near_zero_loss():
    layer = {"W": np.eye(2), "b": np.zeros(2), "M": np.array([[20.0, 0.0], [0.0, 0.0]])}
    loss, _, _ = mf_local_loss(np.array([[1.0, 0.0]]), layer, np.array([0]))
    assert loss < 1e-8


def test_width_mismatch_rejected():
    with pytest.raises(ValueError):
        mf_layer_scores(np.ones((1, 3)), np.ones((4, 2)))


def test_local_gradients_match_finite_differences():
    for seed in (0, 1, 2):
        assert gradcheck.check_mf_local(seed).ok


def test_projection_init_is_kaiming_on_layer_width():
    params = build_mf(MlpSpec((50, 400, 10)), make_rng(0), np.float64)
    M = params[0]["M"]
    assert M.shape == (400, 10)
    assert abs(M.std() - math.sqrt(2 / 400)) < 0.01
    assert "M" not in params[-1]


def test_training_later_layer_leaves_earlier_layer_unchanged(blobs, monkeypatch):
    """With layer 1 fixed at its best snapshot, layer-2 training never writes to it."""
    seen = []
    real = mf_module.adamw_step

    def spy(params, grads, state):
        seen.append(id(params))
        return real(params, grads, state)

    monkeypatch.setattr(mf_module, "adamw_step", spy)
    res = train_mf(SPEC, blobs, _config())
    first = res.params[0]
    ids = seen
    last_layer1_step = max(k for k, i in enumerate(ids) if i == id(first))
    assert all(i != id(first) for i in ids[last_layer1_step + 1:])
    assert ids[-1] == id(res.params[-1])


def test_zero_lr_keeps_parameters(blobs):
    res = train_mf(SPEC, blobs, _config(lr=0.0))
    assert res.params.equal(build_mf(SPEC, train_rng(0)[0]))


def test_prediction_sums_scores_with_lowest_index_ties():
    assert aggregate_scores([np.array([2.0, 0.0]), np.array([0.0, 1.0])]).argmax() == 0
    assert aggregate_scores([np.array([1.0, 0.0]), np.array([0.0, 1.0])]).argmax() == 0
    with pytest.raises(ValueError):
        aggregate_scores([np.zeros(2)], "mean")


def test_single_layer_aggregations_agree():
    layers = build_mf(MlpSpec((6, 3)), make_rng(0), np.float64)
    x = make_rng(1).standard_normal((20, 6))
    np.testing.assert_array_equal(predict_mf(layers, x, "sum"), predict_mf(layers, x, "last"))


def test_prediction_uses_hidden_and_output_scores():
    layers = ModelParams([
        {"W": np.eye(2), "b": np.zeros(2), "M": np.array([[0.0, 5.0], [0.0, 0.0]])},
        {"W": np.array([[1.0, 0.0], [0.0, 0.0]]), "b": np.zeros(2)},
    ])
    # hidden scores [0, 5], output logits [1, 0]: sum picks 1, last picks 0
    assert predict_mf(layers, np.array([1.0, 0.0]), "sum") == 1
    assert predict_mf(layers, np.array([1.0, 0.0]), "last") == 0


@pytest.mark.parametrize("mode", ["sequential", "interleaved"])
def test_deterministic_and_learns(blobs, mode):
    cfg = _config(max_epochs=4, extras={"schedule": mode})
    a, b = train_mf(SPEC, blobs, cfg), train_mf(SPEC, blobs, cfg)
    assert a.val_acc == b.val_acc and a.params.equal(b.params)
    assert a.test_acc > 0.9


def test_sequential_phases_and_budgets(blobs):
    res = train_mf(SPEC, blobs, _config(), schedule=MfSchedule("sequential", (1, 2, 3)))
    assert [p["active_layer"] for p in res.phases] == [1, 2, 3]
    assert all(p["phase"] == "mf_layer" for p in res.phases)
    assert [e["active_layer"] for e in res.logs] == [1, 2, 2, 3, 3, 3]
    assert all("local_loss" in e for e in res.logs)


def test_one_optimizer_state_alive_at_a_time(blobs, monkeypatch):
    live = []
    peak = [0]
    real = mf_module.AdamWState.for_params

    def tracked(params, lr, weight_decay=0.0):
        state = real(params, lr, weight_decay)
        live.append(weakref.ref(state))
        peak[0] = max(peak[0], sum(r() is not None for r in live))
        return state

    monkeypatch.setattr(mf_module.AdamWState, "for_params", staticmethod(tracked))
    train_mf(SPEC, blobs, _config())
    assert len(live) == 3 and peak[0] == 1


def test_schedule_validation():
    with pytest.raises(ValueError):
        MfSchedule("random")
    with pytest.raises(ValueError):
        MfSchedule("sequential", 0)
    assert MfSchedule(layer_epochs=(2, 5)).budget(1, 9) == 5
    assert MfSchedule().budget(0, 9) == 9
