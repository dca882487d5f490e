import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forwardbench.core import make_rng
from forwardbench.search import (
    Choice,
    EarlyStopPolicy,
    EarlyStopper,
    Fixed,
    IntUniform,
    LogUniform,
    SearchSpace,
    domain_from_config,
    early_stop_step,
    random_search,
)


def _run(policy, values):
    """Feed values one at a time; return (stop epoch, best epoch), 1-based."""
    for i in range(1, len(values) + 1):
        d = early_stop_step(policy, values[:i])
        if d.stop:
            return i, d.best_epoch
    return None, early_stop_step(policy, values).best_epoch


def test_early_stop_examples():
    assert _run(EarlyStopPolicy(patience=2), [0.1, 0.3, 0.2, 0.2]) == (4, 2)
    assert _run(EarlyStopPolicy(patience=3), [0.5] * 6) == (4, 1)
    assert _run(EarlyStopPolicy(patience=2, max_epochs=3), [0.1, 0.2, 0.3, 0.4]) == (3, 3)


def test_min_delta_counts_small_gains_as_stalls():
    assert _run(EarlyStopPolicy(patience=2, min_delta=0.05), [0.5, 0.52, 0.54]) == (3, 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 6))
def test_best_epoch_is_earliest_argmax(values, patience):
    d = early_stop_step(EarlyStopPolicy(patience, 0.0, 1000), values)
    assert values[d.best_index] == max(values)
    assert all(v < max(values) for v in values[:d.best_index])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 6))
def test_stop_never_before_patience_exhausted(values, patience):
    d = early_stop_step(EarlyStopPolicy(patience, 0.0, 1000), values)
    if d.stop:
        assert len(values) > patience


def test_stopper_keeps_best_snapshot():
    s = EarlyStopper(EarlyStopPolicy(2))
    for i, v in enumerate([0.1, 0.4, 0.3]):
        s.update(v, lambda i=i: i)
    assert s.best_snapshot == 1 and s.best_value == 0.4


def test_policy_validation():
    with pytest.raises(ValueError):
        EarlyStopPolicy(patience=0)
    with pytest.raises(ValueError):
        LogUniform(0, 1)
    with pytest.raises(ValueError):
        Choice(())


def test_random_search_finds_quadratic_peak():
    space = SearchSpace({"lr": LogUniform(1e-4, 1.0)})
    res = random_search(space, 50, lambda p, seed: -(p["lr"] - 0.01) ** 2, make_rng(0))
    assert 0.003 <= res.best.params["lr"] <= 0.03
    assert len(res.trials) == 50


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_log_uniform_within_bounds(seed):
    d = LogUniform(1e-5, 1e-1)
    rng = make_rng(seed)
    assert all(1e-5 <= d.sample(rng) <= 1e-1 for _ in range(20))


def test_int_and_choice_domains():
    rng = make_rng(1)
    assert {IntUniform(2, 4).sample(rng) for _ in range(100)} == {2, 3, 4}
    assert {Choice((32, 64)).sample(rng) for _ in range(50)} == {32, 64}
    assert domain_from_config({"log": [1e-3, 1e-1]}) == LogUniform(1e-3, 1e-1)
    assert domain_from_config({"choice": [1, 2]}) == Choice((1, 2))
    assert domain_from_config(7) == Fixed(7)


def test_search_is_deterministic_and_workers_agree():
    space = SearchSpace.default("mf")
    f = lambda p, seed: p["lr"] * seed % 1.0  # noqa: E731
    a = random_search(space, 8, f, make_rng(3))
    b = random_search(space, 8, f, make_rng(3), workers=3)
    assert [t.params for t in a.trials] == [t.params for t in b.trials]
    assert [t.objective for t in a.trials] == [t.objective for t in b.trials]
    assert a.best.trial_id == b.best.trial_id


def test_failed_trials_do_not_stop_search(tmp_path):
    def f(p, seed):
        if p["x"] < 0.5:
            raise RuntimeError("boom")
        return p["x"]

    ledger = tmp_path / "trials.jsonl"
    res = random_search(SearchSpace({"x": Choice((0.1, 0.9))}), 10, f, make_rng(0), ledger_path=ledger)
    statuses = {t.status for t in res.trials}
    assert statuses == {"ok", "failed"}
    assert res.best.objective == 0.9
    rows = [json.loads(line) for line in ledger.read_text().splitlines()]
    assert len(rows) == 10
    assert all(r["val_acc"] is None for r in rows if r["status"] == "failed")
    assert {"trial_id", "params", "val_acc", "status"} <= set(rows[0])


def test_trial_seed_pins_training_seed():
    seeds = []
    random_search(SearchSpace({"x": Fixed(1)}), 4, lambda p, s: seeds.append(s) or 0.0, make_rng(0), trial_seed=11)
    assert seeds == [11] * 4


def test_default_space_per_algorithm():
    assert set(SearchSpace.default("bp").domains) == {"lr", "batch_size", "weight_decay"}
    assert "theta" in SearchSpace.default("ff").domains
    over = SearchSpace.default("bp").with_overrides({"lr": {"log": [1e-3, 1e-2]}, "max_epochs": 3})
    assert over.domains["lr"] == LogUniform(1e-3, 1e-2) and over.domains["max_epochs"] == Fixed(3)
    assert np.isfinite(over.sample(make_rng(0))["lr"])
