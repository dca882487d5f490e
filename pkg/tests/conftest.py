"""Shared fixtures: small synthetic sets and the real MNIST sample.

Full MNIST / CIFAR-10 are looked up under ``$FORWARDBENCH_DATA`` (then
``./data``). When absent, MNIST tests fall back to the 5,000-image MNIST
sample bundled with mlxtend (500 per class), written out as IDX files so the
real loader path is exercised.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from forwardbench.core import make_rng
from forwardbench.data import DataSplits, LabeledBatch, load_raw, stratified_split, write_idx


def dataset_root() -> Path:
    return Path(os.environ.get("FORWARDBENCH_DATA", "data"))


def full_dataset(name: str):
    """``(train, test)`` of the official dataset, or ``None`` if it is not on disk."""
    try:
        return load_raw(name, dataset_root())
    except (FileNotFoundError, OSError):
        return None


def mnist_sample_batch() -> LabeledBatch:
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return LabeledBatch((x / 255.0).astype(np.float32), y.astype(np.int64), 10)


@pytest.fixture(scope="session")
def mnist_sample():
    """(train 4000, test 1000) stratified split of the 5k MNIST sample."""
    train, test = stratified_split(mnist_sample_batch(), 0.2, make_rng(2024))
    return train, test


@pytest.fixture(scope="session")
def mnist_dir(mnist_sample, tmp_path_factory):
    """A data root holding the MNIST sample in IDX layout (``mnist/``)."""
    root = tmp_path_factory.mktemp("data")
    train, test = mnist_sample
    d = root / "mnist"
    d.mkdir()
    write_idx(train, d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte", (28, 28))
    write_idx(test, d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte", (28, 28))
    return root


def make_blobs(n: int, dim: int, classes: int, rng, spread: float = 1.0, centers=None):
    centers = centers if centers is not None else make_rng(7).standard_normal((classes, dim)) * 3
    y = np.arange(n) % classes
    rng.shuffle(y)
    x = centers[y] + rng.standard_normal((n, dim)) * spread
    return LabeledBatch(x.astype(np.float32), y.astype(np.int64), classes)


@pytest.fixture
def blobs():
    """Well-separated 4-class Gaussian blobs in 20-D: train/val/test."""
    rng = make_rng(0)
    return DataSplits(make_blobs(240, 20, 4, rng), make_blobs(80, 20, 4, rng), make_blobs(80, 20, 4, rng))


@pytest.fixture
def image_blobs():
    """4-class 1x8x8 'images' with class-specific mean patterns."""
    rng = make_rng(1)
    centers = make_rng(8).standard_normal((4, 64)) * 2
    return DataSplits(*(make_blobs(n, 64, 4, rng, centers=centers) for n in (160, 60, 60)))


# -- acceptance reporting -----------------------------------------------------------

@pytest.fixture
def criterion(request):
    """``record(number, title, ok, detail)``: log one PASS/FAIL line, shown in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  [{number:>2}] {title}" + (f" :: {detail}" if detail else "")
        lines[(number, title)] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
