"""Small datasets shared by the demos: the 5k MNIST sample (via mlxtend) and Gaussian blobs."""
from __future__ import annotations

import numpy as np

from forwardbench.core import make_rng
from forwardbench.data import DataSplits, LabeledBatch, stratified_split, subsample


def mnist_sample_splits(n_train: int | None = None, seed: int = 0) -> DataSplits:
    """Train/val/test splits of the 5,000-image MNIST sample bundled with mlxtend."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    full = LabeledBatch((x / 255.0).astype(np.float32), y.astype(np.int64), 10)
    rest, test = stratified_split(full, 0.2, make_rng(seed))
    if n_train is not None:
        rest = subsample(rest, n_train, make_rng(seed + 1))
    train, val = stratified_split(rest, 0.1, make_rng(seed + 2))
    return DataSplits(train, val, test)


def blobs(n: int, dim: int, classes: int, rng, centers, spread: float = 1.0) -> LabeledBatch:
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = centers[y] + rng.standard_normal((n, dim)) * spread
    return LabeledBatch(x.astype(np.float32), y.astype(np.int64), classes)
