"""Benchmark dataset loading, splitting and FF label overlays.

Readers accept the native distribution formats: IDX (MNIST, Fashion-MNIST,
optionally gzipped) and the CIFAR binary versions. Nothing is downloaded;
put the files under ``$FORWARDBENCH_DATA`` (see README for the layout).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR100_RECORD = 2 + 3 * 32 * 32

NUM_CLASSES = {"mnist": 10, "fashion_mnist": 10, "cifar10": 10, "cifar100": 100}
IMAGE_SHAPE = {"mnist": (1, 28, 28), "fashion_mnist": (1, 28, 28), "cifar10": (3, 32, 32), "cifar100": (3, 32, 32)}


class DataFormatError(ValueError):
    """A dataset file does not match its declared binary layout."""


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label exceeds num_classes")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.inputs[idx], self.labels[idx], self.num_classes)

    def flat(self) -> "LabeledBatch":
        """MLP view: one row per sample."""
        return LabeledBatch(self.inputs.reshape(len(self), -1), self.labels, self.num_classes)

    def images(self, shape) -> "LabeledBatch":
        """CNN view, ``shape = (channels, h, w)``."""
        return LabeledBatch(self.inputs.reshape(len(self), *shape), self.labels, self.num_classes)

    def astype(self, dtype) -> "LabeledBatch":
        return LabeledBatch(self.inputs.astype(dtype), self.labels, self.num_classes)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: str | None = None
    subset: int = 0
    val_fraction: float = 0.1
    normalization: str | None = None  # "scale" | "standardize"; None picks the dataset default
    test_subset: int = 0

    def __post_init__(self):
        if self.name not in NUM_CLASSES:
            raise DataConfigError(f"unknown dataset {self.name!r}")
        if not 0 < self.val_fraction < 1:
            raise DataConfigError("validation fraction must lie in (0, 1)")
        if self.subset < 0:
            raise DataConfigError("subset must be >= 0")

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.name]

    @property
    def image_shape(self) -> tuple:
        return IMAGE_SHAPE[self.name]

    @property
    def resolved_normalization(self) -> str:
        if self.normalization:
            return self.normalization
        return "standardize" if self.name.startswith("cifar") else "scale"


def data_root(spec_root: str | None = None) -> Path:
    env = os.environ.get("FORWARDBENCH_DATA")
    if env:
        return Path(env)
    if spec_root:
        return Path(spec_root)
    return Path("data")


# -- IDX --------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> tuple[tuple, np.ndarray]:
    if len(raw) < 8:
        raise DataFormatError(f"{what}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{what}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{what}: truncated header at byte offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_len])
    n_items = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) != n_items:
        got = len(body) // max(1, int(np.prod(dims[1:])))
        raise DataFormatError(
            f"{what}: header declares {dims[0]} items but data ends at byte offset "
            f"{len(raw)} ({got} complete items; expected {header_len + n_items} bytes)"
        )
    return dims, np.frombuffer(body, dtype=np.uint8)


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledBatch:
    """Read an IDX image/label pair; pixels come back as float32 in [0, 1]."""
    idims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    ldims, labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if idims[0] != ldims[0]:
        raise DataFormatError(f"count mismatch: {idims[0]} images vs {ldims[0]} labels")
    n = idims[0]
    features = int(np.prod(idims[1:]))
    inputs = pixels.reshape(n, features).astype(np.float32) / 255.0
    return LabeledBatch(inputs, labels.astype(np.int64), num_classes)


def write_idx(batch: LabeledBatch, images_path, labels_path, image_hw=None) -> None:
    """Write ``batch`` as an IDX pair; pixels are re-quantized to bytes."""
    n = len(batch)
    flat = batch.inputs.reshape(n, int(np.prod(batch.inputs.shape[1:])))
    if image_hw is None:
        side = int(round(np.sqrt(flat.shape[1])))
        image_hw = (side, flat.shape[1] // side if side else 0)
    rows, cols = image_hw
    if rows * cols != flat.shape[1]:
        raise ValueError("image_hw does not match feature count")
    pix = np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(batch.labels.astype(np.uint8).tobytes())


# -- CIFAR ------------------------------------------------------------------

def load_cifar_binary(paths, coarse_labels: bool = False, cifar100: bool | None = None) -> LabeledBatch:
    """Read CIFAR-10 (3073-byte) or CIFAR-100 (3074-byte) binary records.

    The variant is inferred from ``cifar100`` or, when None, from
    ``coarse_labels``/file names containing "100".
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    paths = [Path(p) for p in paths]
    if cifar100 is None:
        cifar100 = coarse_labels or any("100" in p.name or "100" in p.parent.name for p in paths)
    rec = CIFAR100_RECORD if cifar100 else CIFAR10_RECORD
    xs, ys = [], []
    for p in paths:
        raw = p.read_bytes()
        if len(raw) % rec:
            full = len(raw) // rec
            raise DataFormatError(
                f"{p}: length {len(raw)} is not a multiple of the {rec}-byte record "
                f"(truncated record at byte offset {full * rec})"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
        if cifar100:
            ys.append(arr[:, 0] if coarse_labels else arr[:, 1])
            xs.append(arr[:, 2:])
        else:
            ys.append(arr[:, 0])
            xs.append(arr[:, 1:])
    labels = np.concatenate(ys).astype(np.int64) if ys else np.zeros(0, np.int64)
    inputs = (np.concatenate(xs) if xs else np.zeros((0, 3072), np.uint8)).astype(np.float32) / 255.0
    n_classes = 20 if (cifar100 and coarse_labels) else (100 if cifar100 else 10)
    return LabeledBatch(inputs, labels, n_classes)


# -- splitting ----------------------------------------------------------------

def stratified_split(batch: LabeledBatch, val_fraction: float, rng: np.random.Generator):
    """Per-class shuffled split; each class contributes round(n_c * fraction)."""
    if not 0 < val_fraction < 1:
        raise DataConfigError("validation fraction must lie in (0, 1)")
    train_idx, val_idx = [], []
    for c in np.unique(batch.labels):
        idx = np.flatnonzero(batch.labels == c)
        if len(idx) < 2:
            raise DataConfigError(f"class {c} has fewer than 2 samples")
        idx = rng.permutation(idx)
        k = int(np.floor(len(idx) * val_fraction + 0.5))
        k = min(max(k, 1), len(idx) - 1)
        val_idx.append(idx[:k])
        train_idx.append(idx[k:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return batch.take(tr), batch.take(va)


def subsample(batch: LabeledBatch, n: int, rng: np.random.Generator) -> LabeledBatch:
    """Class-stratified subset of size ``n`` (largest-remainder allocation)."""
    total = len(batch)
    if n > total:
        raise DataConfigError(f"requested {n} samples but only {total} available")
    if n == total:
        return batch
    classes, counts = np.unique(batch.labels, return_counts=True)
    quota = counts * n / total
    alloc = np.floor(quota).astype(int)
    rest = n - alloc.sum()
    order = np.lexsort((classes, -(quota - alloc)))
    alloc[order[:rest]] += 1
    picked = []
    for c, k in zip(classes, alloc):
        idx = np.flatnonzero(batch.labels == c)
        picked.append(rng.permutation(idx)[:k])
    return batch.take(np.sort(np.concatenate(picked)))


def merge(a: LabeledBatch, b: LabeledBatch) -> LabeledBatch:
    return LabeledBatch(np.concatenate([a.inputs, b.inputs]), np.concatenate([a.labels, b.labels]), a.num_classes)


# -- normalization -------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mode: str
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    channels: int = 1

    @classmethod
    def fit(cls, batch: LabeledBatch, mode: str, channels: int = 1) -> "Normalizer":
        if mode == "scale":
            return cls("scale")
        if mode != "standardize":
            raise DataConfigError(f"unknown normalization {mode!r}")
        x = batch.inputs.reshape(len(batch), channels, -1)
        return cls("standardize", x.mean(axis=(0, 2)), x.std(axis=(0, 2)) + 1e-8, channels)

    def __call__(self, batch: LabeledBatch) -> LabeledBatch:
        if self.mode == "scale":
            return batch
        shape = batch.inputs.shape
        x = batch.inputs.reshape(shape[0], self.channels, -1)
        x = (x - self.mean[None, :, None]) / self.std[None, :, None]
        return LabeledBatch(x.reshape(shape).astype(np.float32), batch.labels, batch.num_classes)


# -- dataset assembly ------------------------------------------------------------

def _find(root: Path, *candidates: str) -> Path:
    for c in candidates:
        for p in (root / c, Path(str(root / c) + ".gz")):
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {candidates} found under {root}")


def load_raw(name: str, root: Path) -> tuple[LabeledBatch, LabeledBatch]:
    """Return the official (train, test) split of a dataset in [0, 1] pixels."""
    if name in ("mnist", "fashion_mnist"):
        sub = root / name
        base = sub if sub.exists() else root
        train = load_idx(_find(base, "train-images-idx3-ubyte", "train-images.idx3-ubyte"),
                         _find(base, "train-labels-idx1-ubyte", "train-labels.idx1-ubyte"))
        test = load_idx(_find(base, "t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
                        _find(base, "t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"))
        return train, test
    if name == "cifar10":
        base = root / "cifar-10-batches-bin"
        if not base.exists():
            base = root / "cifar10"
        train = load_cifar_binary([base / f"data_batch_{i}.bin" for i in range(1, 6)], cifar100=False)
        test = load_cifar_binary([base / "test_batch.bin"], cifar100=False)
        return train, test
    if name == "cifar100":
        base = root / "cifar-100-binary"
        if not base.exists():
            base = root / "cifar100"
        return (load_cifar_binary([base / "train.bin"], cifar100=True),
                load_cifar_binary([base / "test.bin"], cifar100=True))
    raise DataConfigError(f"unknown dataset {name!r}")


@dataclass(frozen=True)
class DataSplits:
    train: LabeledBatch
    val: LabeledBatch
    test: LabeledBatch
    spec: DatasetSpec | None = None

    @property
    def num_classes(self) -> int:
        return self.train.num_classes

    @property
    def image_shape(self) -> tuple | None:
        return self.spec.image_shape if self.spec else None

    def flat(self) -> "DataSplits":
        return replace(self, train=self.train.flat(), val=self.val.flat(), test=self.test.flat())

    def images(self, shape=None) -> "DataSplits":
        shape = shape or self.image_shape
        return replace(self, train=self.train.images(shape), val=self.val.images(shape), test=self.test.images(shape))

    def astype(self, dtype) -> "DataSplits":
        return replace(self, train=self.train.astype(dtype), val=self.val.astype(dtype), test=self.test.astype(dtype))


def prepare_splits(train: LabeledBatch, test: LabeledBatch, spec: DatasetSpec, seed: int) -> DataSplits:
    """Subsample, carve the validation split, and normalize using train statistics."""
    from .core import derive_seed, make_rng

    if spec.subset:
        train = subsample(train, spec.subset, make_rng(derive_seed(seed, 1)))
    if spec.test_subset:
        test = subsample(test, min(spec.test_subset, len(test)), make_rng(derive_seed(seed, 2)))
    tr, va = stratified_split(train, spec.val_fraction, make_rng(derive_seed(seed, 3)))
    norm = Normalizer.fit(tr, spec.resolved_normalization, channels=spec.image_shape[0])
    return DataSplits(norm(tr), norm(va), norm(test), spec)


def load_dataset(spec: DatasetSpec, seed: int = 0) -> DataSplits:
    train, test = load_raw(spec.name, data_root(spec.root))
    return prepare_splits(train, test, spec, seed)


# -- FF label overlay ----------------------------------------------------------------

def overlay_label(inputs: np.ndarray, labels, num_classes: int, intensity: float = 1.0) -> np.ndarray:
    """Replace the first ``num_classes`` features with ``intensity * onehot(label)``."""
    x = np.array(inputs, copy=True)
    single = x.ndim == 1
    if single:
        x = x[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if x.shape[1] < num_classes:
        raise DataConfigError("need at least num_classes features to overlay a label")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError("label out of range")
    x[:, :num_classes] = 0
    x[np.arange(len(x)), labels] = intensity
    return x[0] if single else x


def sample_wrong_labels(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the ``num_classes - 1`` incorrect classes per sample."""
    offset = rng.integers(1, num_classes, size=len(labels))
    return (np.asarray(labels) + offset) % num_classes
