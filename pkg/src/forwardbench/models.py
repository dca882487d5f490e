"""Architecture specs, parameter containers, forward passes and cost accounting.

Dense weights are stored ``(in, out)`` so a batch evaluates as ``x @ W + b``.
Conv weights are ``(out, in, kh, kw)`` and images are ``(N, C, H, W)``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import DEFAULT_DTYPE, DimensionError, kaiming_init, relu, relu_grad


def _identity(x):
    return x


def _identity_grad(x):
    return np.ones_like(x)


ACTIVATIONS = {"relu": (relu, relu_grad), "identity": (_identity, _identity_grad)}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    def label(self) -> str:
        hidden = self.widths[1:-1]
        if hidden and len(set(hidden)) == 1:
            return f"MLP {len(hidden)}x{hidden[0]}"
        return "MLP " + "-".join(map(str, self.widths))


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    pool: str | None = "max"
    pool_size: int = 2
    activation: str = "relu"

    def output_shape(self, in_shape) -> tuple:
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"block expects {self.in_channels} channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if self.pool:
            ho //= self.pool_size
            wo //= self.pool_size
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"block output for input {in_shape} is empty")
        return (self.out_channels, ho, wo)

    def conv_shape(self, in_shape) -> tuple:
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        return (self.out_channels, ho, wo)


@dataclass(frozen=True)
class DenseBlockSpec:
    in_features: int
    out_features: int
    activation: str = "relu"

    def output_shape(self, in_shape) -> tuple:
        if int(np.prod(in_shape)) != self.in_features:
            raise DimensionError(f"block expects {self.in_features} features, got shape {in_shape}")
        return (self.out_features,)


def default_cafo_blocks(in_channels: int = 3) -> tuple:
    return (
        ConvBlockSpec(in_channels, 32),
        ConvBlockSpec(32, 64),
        ConvBlockSpec(64, 128),
    )


@dataclass(frozen=True)
class CascadeSpec:
    """A chain of conv (or dense) blocks on ``input_shape`` inputs with ``num_classes`` outputs."""

    input_shape: tuple
    num_classes: int
    blocks: tuple = field(default_factory=default_cafo_blocks)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("a cascade needs at least one block")
        self.block_shapes()

    def block_shapes(self) -> list:
        shapes, s = [], self.input_shape
        for blk in self.blocks:
            s = blk.output_shape(s)
            shapes.append(s)
        return shapes

    def feature_widths(self) -> list:
        return [int(np.prod(s)) for s in self.block_shapes()]

    def label(self) -> str:
        kind = "CNN" if any(isinstance(b, ConvBlockSpec) for b in self.blocks) else "Dense"
        return f"{kind} {len(self.blocks)}-block"


class ModelParams:
    """Ordered per-layer tensor dicts (``W``, ``b`` and trainer-owned extras)."""

    def __init__(self, layers):
        self.layers = [dict(layer) for layer in layers]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams([{k: v.copy() for k, v in layer.items()} for layer in self.layers])

    def astype(self, dtype) -> "ModelParams":
        return ModelParams([{k: v.astype(dtype) for k, v in layer.items()} for layer in self.layers])

    def count(self) -> int:
        return sum(v.size for layer in self.layers for v in layer.values())

    def nbytes(self) -> int:
        return sum(v.nbytes for layer in self.layers for v in layer.values())

    def named_tensors(self):
        for i, layer in enumerate(self.layers):
            for k in sorted(layer):
                yield f"{i}.{k}", layer[k]

    def equal(self, other: "ModelParams") -> bool:
        if len(self) != len(other):
            return False
        return all(
            a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
            for a, b in zip(self.layers, other.layers)
        )


# -- MLP -------------------------------------------------------------------------

def build_mlp(spec: MlpSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> ModelParams:
    layers = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        layers.append({"W": kaiming_init((fan_in, fan_out), rng, dtype=dtype),
                       "b": np.zeros(fan_out, dtype=dtype)})
    return ModelParams(layers)


def mlp_param_count(spec: MlpSpec) -> int:
    return sum(i * o + o for i, o in zip(spec.widths[:-1], spec.widths[1:]))


class Forward(NamedTuple):
    pre: list  # pre-activations z_l
    post: list  # activations a_l; post[-1] are the logits


def forward_collect(params: ModelParams, inputs: np.ndarray, activation: str = "relu") -> Forward:
    act, _ = ACTIVATIONS[activation]
    x = inputs
    if x.shape[-1] != params[0]["W"].shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != layer width {params[0]['W'].shape[0]}")
    pre, post = [], []
    last = len(params) - 1
    for i, layer in enumerate(params):
        z = x @ layer["W"] + layer["b"]
        x = z if i == last else act(z)
        pre.append(z)
        post.append(x)
    return Forward(pre, post)


def mlp_logits(params: ModelParams, inputs: np.ndarray, activation: str = "relu") -> np.ndarray:
    act, _ = ACTIVATIONS[activation]
    x = inputs
    last = len(params) - 1
    for i, layer in enumerate(params):
        x = x @ layer["W"] + layer["b"]
        if i != last:
            x = act(x)
    return x


# -- convolution ------------------------------------------------------------------

def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """``(N, C, H, W)`` -> ``(N, Ho, Wo, C*k*k)`` patch matrix (C-major, then kh, kw)."""
    xp = _pad(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0):
    """Convolution (cross-correlation). Returns ``(out, cols)``; ``cols`` feeds the backward pass."""
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"input {x.shape} incompatible with weights {w.shape}")
    o, _, k, _ = w.shape
    cols = im2col(x, k, stride, padding)
    out = cols @ w.reshape(o, -1).T + b
    return out.transpose(0, 3, 1, 2), cols


def conv2d_backward(dout, cols, x_shape, w, stride=1, padding=0, need_dx=True):
    """Gradients of ``conv2d`` w.r.t. input, weights and bias."""
    o, c, k, _ = w.shape
    n, _, h, wd = x_shape
    d = dout.transpose(0, 2, 3, 1)  # (N, Ho, Wo, O)
    dw = (cols.reshape(-1, cols.shape[-1]).T @ d.reshape(-1, o)).T.reshape(w.shape)
    db = d.sum(axis=(0, 1, 2))
    if not need_dx:
        return None, dw, db
    dcols = (d @ w.reshape(o, -1)).reshape(n, d.shape[1], d.shape[2], c, k, k)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    ho, wo = d.shape[1], d.shape[2]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx, dw, db


def maxpool2d(x: np.ndarray, size: int = 2):
    """Non-overlapping max pooling; returns ``(out, argmax)`` with first-max tie breaking."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    xc = x[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size)
    win = xc.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(dout, idx, x_shape, size: int = 2):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    win = np.zeros((n, c, ho, wo, size * size), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :ho * size, :wo * size] = win
    return dx


def avgpool2d(x, size=2):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    return x[:, :, :ho * size, :wo * size].reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))


def avgpool2d_backward(dout, x_shape, size=2):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    g = np.repeat(np.repeat(dout, size, axis=2), size, axis=3) / (size * size)
    dx[:, :, :ho * size, :wo * size] = g
    return dx


def build_conv_block(block: ConvBlockSpec, rng, dtype=DEFAULT_DTYPE) -> dict:
    k = block.kernel_size
    shape = (block.out_channels, block.in_channels, k, k)
    return {"W": kaiming_init(shape, rng, dtype=dtype), "b": np.zeros(block.out_channels, dtype=dtype)}


class BlockCache(NamedTuple):
    x_shape: tuple
    cols: np.ndarray
    z: np.ndarray
    a: np.ndarray
    pool_idx: np.ndarray | None


def conv_block_forward(block: ConvBlockSpec, params: dict, x: np.ndarray, keep_cache: bool = False):
    act, _ = ACTIVATIONS[block.activation]
    z, cols = conv2d(x, params["W"], params["b"], block.stride, block.padding)
    a = act(z)
    idx = None
    if block.pool == "max":
        out, idx = maxpool2d(a, block.pool_size)
    elif block.pool == "avg":
        out = avgpool2d(a, block.pool_size)
    else:
        out = a
    if keep_cache:
        return out, BlockCache(x.shape, cols, z, a, idx)
    return out


def conv_block_backward(block: ConvBlockSpec, params: dict, dout: np.ndarray, cache: BlockCache, need_dx=True):
    """Backward through pool, activation and conv of one block."""
    _, act_grad = ACTIVATIONS[block.activation]
    if block.pool == "max":
        da = maxpool2d_backward(dout, cache.pool_idx, cache.a.shape, block.pool_size)
    elif block.pool == "avg":
        da = avgpool2d_backward(dout, cache.a.shape, block.pool_size)
    else:
        da = dout
    dz = da * act_grad(cache.z)
    dx, dw, db = conv2d_backward(dz, cache.cols, cache.x_shape, params["W"], block.stride, block.padding, need_dx)
    return dx, {"W": dw, "b": db}


def conv_forward(block: ConvBlockSpec, params: dict, inputs: np.ndarray) -> np.ndarray:
    """Convolution + activation + pooling for one block."""
    return conv_block_forward(block, params, inputs)


def build_block(block, rng, dtype=DEFAULT_DTYPE) -> dict:
    if isinstance(block, DenseBlockSpec):
        return {"W": kaiming_init((block.in_features, block.out_features), rng, dtype=dtype),
                "b": np.zeros(block.out_features, dtype=dtype)}
    return build_conv_block(block, rng, dtype)


def block_forward(block, params: dict, x: np.ndarray, keep_cache: bool = False):
    """Forward one cascade block; dense blocks flatten their input."""
    if isinstance(block, ConvBlockSpec):
        return conv_block_forward(block, params, x, keep_cache)
    act, _ = ACTIVATIONS[block.activation]
    xf = x.reshape(len(x), -1)
    z = xf @ params["W"] + params["b"]
    a = act(z)
    if keep_cache:
        return a, BlockCache(x.shape, xf, z, a, None)
    return a


def block_backward(block, params: dict, dout: np.ndarray, cache: BlockCache, need_dx=True):
    if isinstance(block, ConvBlockSpec):
        return conv_block_backward(block, params, dout, cache, need_dx)
    _, act_grad = ACTIVATIONS[block.activation]
    dz = dout.reshape(cache.z.shape) * act_grad(cache.z)
    grads = {"W": cache.cols.T @ dz, "b": dz.sum(axis=0)}
    dx = (dz @ params["W"].T).reshape(cache.x_shape) if need_dx else None
    return dx, grads


def build_cnn(spec: CascadeSpec, rng, dtype=DEFAULT_DTYPE, head: bool = True) -> ModelParams:
    """Blocks followed (optionally) by a dense classifier on the last block's flattened output."""
    layers = [build_block(b, rng, dtype) for b in spec.blocks]
    if head:
        fan_in = spec.feature_widths()[-1]
        layers.append({"W": kaiming_init((fan_in, spec.num_classes), rng, dtype=dtype),
                       "b": np.zeros(spec.num_classes, dtype=dtype)})
    return ModelParams(layers)


def cnn_features(spec: CascadeSpec, params: ModelParams, x: np.ndarray) -> list:
    """Flattened output of every block."""
    feats = []
    x = x.reshape(len(x), *spec.input_shape)
    for blk, p in zip(spec.blocks, params.layers):
        x = block_forward(blk, p, x)
        feats.append(x.reshape(len(x), -1))
    return feats


def cnn_logits(spec: CascadeSpec, params: ModelParams, x: np.ndarray) -> np.ndarray:
    feats = cnn_features(spec, params, x)
    head = params[len(spec.blocks)]
    return feats[-1] @ head["W"] + head["b"]


# -- cost accounting ----------------------------------------------------------------

def flops_forward(spec, batch: int = 1) -> int:
    """Forward multiply-accumulate cost, 2 FLOPs per MAC; bias, activation and pooling excluded."""
    if isinstance(spec, MlpSpec):
        return batch * sum(2 * i * o for i, o in zip(spec.widths[:-1], spec.widths[1:]))
    if isinstance(spec, CascadeSpec):
        total, shape = 0, spec.input_shape
        for blk in spec.blocks:
            if isinstance(blk, DenseBlockSpec):
                total += 2 * blk.in_features * blk.out_features
            else:
                co, ho, wo = blk.conv_shape(shape)
                total += 2 * blk.in_channels * blk.kernel_size ** 2 * co * ho * wo
            shape = blk.output_shape(shape)
        total += 2 * int(np.prod(shape)) * spec.num_classes
        return batch * total
    raise TypeError(f"unsupported spec {type(spec).__name__}")


def param_count(spec) -> int:
    if isinstance(spec, MlpSpec):
        return mlp_param_count(spec)
    total = 0
    for blk in spec.blocks:
        if isinstance(blk, DenseBlockSpec):
            total += blk.in_features * blk.out_features + blk.out_features
        else:
            total += blk.out_channels * blk.in_channels * blk.kernel_size ** 2 + blk.out_channels
    return total + spec.feature_widths()[-1] * spec.num_classes + spec.num_classes


# -- spec (de)serialization ---------------------------------------------------------

def spec_to_dict(spec) -> dict:
    if isinstance(spec, MlpSpec):
        return {"kind": "mlp", "widths": list(spec.widths), "activation": spec.activation}
    return {"kind": "cascade", "input_shape": list(spec.input_shape), "num_classes": spec.num_classes,
            "blocks": [{"type": "dense" if isinstance(b, DenseBlockSpec) else "conv", **asdict(b)}
                       for b in spec.blocks]}


def spec_from_dict(d: dict):
    if d["kind"] == "mlp":
        return MlpSpec(tuple(d["widths"]), d.get("activation", "relu"))
    blocks = []
    for b in d["blocks"]:
        b = dict(b)
        kind = b.pop("type", "conv")
        blocks.append(DenseBlockSpec(**b) if kind == "dense" else ConvBlockSpec(**b))
    return CascadeSpec(tuple(d["input_shape"]), int(d["num_classes"]), tuple(blocks))


# -- checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FWDB"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, spec, params: ModelParams, extra: dict | None = None) -> None:
    """Write ``FWDB`` | u16 version | u32 len + JSON header | tensors.

    Each tensor is u32 rank, u32 dims, then little-endian float32 data, in
    the order listed under ``tensors`` in the header.
    """
    names, tensors = zip(*params.named_tensors()) if len(params) else ((), ())
    header = {"spec": spec_to_dict(spec) if spec is not None else None,
              "tensors": list(names), "extra": extra or {}}
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for t in tensors:
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(spec, params, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an FWDB checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 6)
    off = 10
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    layers: dict[int, dict] = {}
    for name in header["tensors"]:
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
        i, key = name.split(".", 1)
        layers.setdefault(int(i), {})[key] = arr
    if off != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    params = ModelParams([layers[i] for i in sorted(layers)])
    spec = spec_from_dict(header["spec"]) if header["spec"] else None
    return spec, params, header["extra"]
