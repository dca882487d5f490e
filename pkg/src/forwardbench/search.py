"""Seeded random search and the early-stopping rule shared by all trainers.

Every algorithm, BP baseline included, is tuned by :func:`random_search` and
stopped by :func:`early_stop_step`. Keep it that way: the comparison is only
fair if the same procedure tunes everything.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, NamedTuple

import numpy as np

from .core import derive_seed, make_rng

log = logging.getLogger(__name__)


# -- early stopping --------------------------------------------------------------

@dataclass(frozen=True)
class EarlyStopPolicy:
    patience: int = 10
    min_delta: float = 0.0
    max_epochs: int = 100

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


class StopDecision(NamedTuple):
    stop: bool
    best_index: int  # 0-based position in the history

    @property
    def best_epoch(self) -> int:
        return self.best_index + 1


def early_stop_step(policy: EarlyStopPolicy, history) -> StopDecision:
    """Decide whether to stop after the latest epoch in ``history``.

    An epoch improves when it beats the best earlier value by more than
    ``min_delta``. Training stops once ``patience`` consecutive epochs fail to
    improve, or when ``max_epochs`` values have been seen. The best epoch is
    the argmax of the history, earliest on ties.
    """
    h = list(history)
    if not h:
        raise ValueError("history must be non-empty")
    best_index = int(np.argmax(h))
    since = 0
    ref = h[0]
    for v in h[1:]:
        if v > ref + policy.min_delta:
            ref = v
            since = 0
        else:
            since += 1
    stop = since >= policy.patience or len(h) >= policy.max_epochs
    return StopDecision(stop, best_index)


class EarlyStopper:
    """Tracks a validation history and keeps the best snapshot."""

    def __init__(self, policy: EarlyStopPolicy, max_epochs: int | None = None):
        if max_epochs is not None and max_epochs != policy.max_epochs:
            policy = EarlyStopPolicy(policy.patience, policy.min_delta, max_epochs)
        self.policy = policy
        self.history: list[float] = []
        self.best_snapshot = None
        self.best_index = -1

    def update(self, value: float, snapshot: Callable[[], Any]) -> bool:
        """Record ``value``; returns True when training should stop."""
        self.history.append(float(value))
        decision = early_stop_step(self.policy, self.history)
        if decision.best_index != self.best_index:
            self.best_index = decision.best_index
            self.best_snapshot = snapshot()
        return decision.stop

    @property
    def best_value(self) -> float:
        return self.history[self.best_index]


# -- search space ------------------------------------------------------------------

@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low <= self.high:
            raise ValueError("log-uniform bounds must satisfy 0 < low <= high")

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError("bounds out of order")

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class IntUniform:
    low: int
    high: int  # inclusive

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError("bounds out of order")

    def sample(self, rng):
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class Choice:
    options: tuple

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if not self.options:
            raise ValueError("choice set must be non-empty")

    def sample(self, rng):
        opt = self.options[int(rng.integers(len(self.options)))]
        return opt.item() if isinstance(opt, np.generic) else opt


@dataclass(frozen=True)
class Fixed:
    value: Any

    def sample(self, rng):
        return self.value


DOMAIN_KINDS = {"log": LogUniform, "uniform": Uniform, "int": IntUniform, "choice": Choice, "fixed": Fixed}


def domain_from_config(value):
    """Parse ``{"log": [lo, hi]}``-style config entries; scalars become :class:`Fixed`."""
    if isinstance(value, dict):
        (kind, arg), = value.items()
        cls = DOMAIN_KINDS[kind]
        if cls is Choice:
            return Choice(tuple(arg))
        if cls is Fixed:
            return Fixed(arg)
        return cls(*arg)
    return Fixed(value)


ALGORITHM_EXTRAS = {
    "bp": {},
    "ff": {"theta": Uniform(1.0, 10.0)},
    "mf": {"layer_epochs": IntUniform(3, 20)},
    "cafo_rand": {},
    "cafo_dfa": {"dfa_epochs": IntUniform(2, 10)},
}


@dataclass
class SearchSpace:
    domains: dict = field(default_factory=dict)

    def sample(self, rng) -> dict:
        # fixed key order keeps the draw sequence reproducible
        return {k: self.domains[k].sample(rng) for k in sorted(self.domains)}

    @classmethod
    def default(cls, algorithm: str = "bp") -> "SearchSpace":
        domains = {
            "lr": LogUniform(1e-5, 1e-1),
            "batch_size": Choice((32, 64, 128)),
            "weight_decay": LogUniform(1e-6, 1e-2),
        }
        domains.update(ALGORITHM_EXTRAS.get(algorithm, {}))
        return cls(domains)

    def with_overrides(self, overrides: dict) -> "SearchSpace":
        d = dict(self.domains)
        for k, v in overrides.items():
            d[k] = v if hasattr(v, "sample") else domain_from_config(v)
        return SearchSpace(d)


# -- random search ----------------------------------------------------------------

@dataclass
class Trial:
    trial_id: int
    params: dict
    seed: int
    status: str = "ok"
    objective: float = float("-inf")
    result: Any = None
    error: str | None = None

    def record(self) -> dict:
        val = self.objective if math.isfinite(self.objective) else None
        return {"trial_id": self.trial_id, "params": self.params, "val_acc": val, "status": self.status}


@dataclass
class SearchResult:
    best: Trial
    trials: list


def random_search(space: SearchSpace, n_trials: int, train_fn, rng, ledger_path=None,
                  workers: int = 1, trial_seed: int | None = None) -> SearchResult:
    """Evaluate ``n_trials`` seeded samples of ``space`` and keep the best.

    ``train_fn(params, seed)`` must return an object with ``best_val_acc``
    (or a float). Exceptions mark the trial failed (objective -inf) and the
    search continues. Samples are all drawn before any evaluation, so the
    trial sequence depends only on ``rng``. ``trial_seed`` pins every trial to
    one training seed; otherwise each gets a derived seed.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(int(rng))
    base = int(rng.integers(2**62))
    trials = []
    for i in range(n_trials):
        seed = trial_seed if trial_seed is not None else derive_seed(base, i)
        trials.append(Trial(i, space.sample(rng), seed))

    def run(trial: Trial) -> Trial:
        try:
            out = train_fn(dict(trial.params), trial.seed)
        except Exception as exc:  # noqa: BLE001 - a failed trial must not end the search
            log.warning("trial %d failed: %s", trial.trial_id, exc)
            trial.status = "failed"
            trial.error = f"{type(exc).__name__}: {exc}"
            return trial
        trial.result = out
        trial.objective = float(out if isinstance(out, (int, float)) else out.best_val_acc)
        if not math.isfinite(trial.objective):
            trial.status = "failed"
            trial.objective = float("-inf")
        return trial

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trials = list(pool.map(run, trials))
    else:
        trials = [run(t) for t in trials]

    if ledger_path is not None:
        with open(ledger_path, "a") as fh:
            for t in trials:
                fh.write(json.dumps(t.record(), sort_keys=True) + "\n")

    best = trials[0]
    for t in trials[1:]:
        if t.objective > best.objective:
            best = t
    return SearchResult(best, trials)
