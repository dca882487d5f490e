"""Configuration, results and loop helpers shared by the trainers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..core import make_rng
from ..search import EarlyStopPolicy
from ..telemetry import RunMetrics, Telemetry

ALGORITHMS = ("bp", "ff", "mf", "cafo_rand", "cafo_dfa")
EVAL_BATCH = 1000


@dataclass
class TrainConfig:
    algorithm: str = "bp"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 20
    weight_decay: float = 0.0
    seed: int = 0
    early_stop: EarlyStopPolicy = field(default_factory=EarlyStopPolicy)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        # lr == 0 is allowed: it is the frozen-parameter control case
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def policy(self, max_epochs: int | None = None) -> EarlyStopPolicy:
        return EarlyStopPolicy(self.early_stop.patience, self.early_stop.min_delta,
                               max_epochs or self.max_epochs)

    def with_params(self, params: dict, seed: int | None = None) -> "TrainConfig":
        """Copy with searched hyperparameters applied; unknown keys go to ``extras``."""
        base = {k: getattr(self, k) for k in ("algorithm", "lr", "batch_size", "max_epochs", "weight_decay", "seed")}
        extras = dict(self.extras)
        for k, v in params.items():
            if k in base and k != "algorithm":
                base[k] = v
            else:
                extras[k] = v
        if seed is not None:
            base["seed"] = seed
        return TrainConfig(early_stop=self.early_stop, extras=extras, **base)


@dataclass
class RunResult:
    algorithm: str
    params: Any  # best checkpoint (ModelParams)
    model: Any = None  # trainer-specific predictor wrapper around ``params``
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1  # 0-based index into val_acc
    best_val_acc: float = float("nan")
    test_acc: float = float("nan")
    metrics: RunMetrics = field(default_factory=RunMetrics)
    phases: list = field(default_factory=list)
    logs: list = field(default_factory=list)  # per-epoch records
    samples: list = field(default_factory=list)
    status: str = "ok"
    diagnostic: str | None = None
    hyperparams: dict = field(default_factory=dict)  # searched values this run was trained with

    @property
    def epochs(self) -> int:
        return len(self.val_acc)


class TrainingDiverged(RuntimeError):
    """Non-finite loss. ``partial`` holds the curves recorded so far."""

    def __init__(self, message: str, partial: RunResult | None = None):
        super().__init__(message)
        self.partial = partial


def check_finite(loss: float, where: str, partial: RunResult | None = None) -> None:
    if not np.isfinite(loss):
        if partial is not None:
            partial.status = "diverged"
            partial.diagnostic = f"non-finite loss in {where}"
        raise TrainingDiverged(f"non-finite loss in {where}", partial)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def batched(fn, x: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    if len(x) <= batch:
        return fn(x)
    return np.concatenate([fn(x[i:i + batch]) for i in range(0, len(x), batch)])


def start_telemetry(telemetry: Telemetry | None) -> Telemetry:
    t = telemetry if telemetry is not None else Telemetry(period_ms=None)
    return t.start()


def finish(result: RunResult, telemetry: Telemetry, flops_per_sample: int) -> RunResult:
    result.metrics = telemetry.stop(flops_per_sample)
    result.phases = list(telemetry.phases)
    result.samples = list(telemetry.samples)
    return result


def train_rng(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for parameter init and batch order."""
    from ..core import derive_seed

    return make_rng(derive_seed(seed, 10)), make_rng(derive_seed(seed, 11))
