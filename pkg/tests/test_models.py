import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forwardbench.core import DimensionError, make_rng, softmax
from forwardbench.models import (
    CascadeSpec,
    CheckpointError,
    ConvBlockSpec,
    DenseBlockSpec,
    MlpSpec,
    ModelParams,
    build_cnn,
    build_mlp,
    conv2d,
    conv_forward,
    flops_forward,
    forward_collect,
    load_checkpoint,
    maxpool2d,
    mlp_param_count,
    param_count,
    save_checkpoint,
    spec_from_dict,
    spec_to_dict,
)
from oracles import conv2d_ref, maxpool_ref


def test_param_count_closed_form():
    spec = MlpSpec((784, 1000, 1000, 10))
    params = build_mlp(spec, make_rng(0))
    assert params.count() == mlp_param_count(spec) == 1_796_010


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=5))
def test_built_count_matches_formula(widths):
    spec = MlpSpec(tuple(widths))
    p = build_mlp(spec, make_rng(0))
    assert p.count() == sum(i * o + o for i, o in zip(widths[:-1], widths[1:]))
    assert len(p) == spec.n_layers
    assert all(np.all(layer["b"] == 0) for layer in p)


def test_build_is_deterministic_and_degenerate_depth():
    spec = MlpSpec((5, 10))
    assert build_mlp(spec, make_rng(3)).equal(build_mlp(spec, make_rng(3)))
    assert len(build_mlp(spec, make_rng(3))) == 1


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((10,))
    with pytest.raises(ValueError):
        MlpSpec((10, 0, 2))
    with pytest.raises(DimensionError):
        CascadeSpec((3, 2, 2), 10, (ConvBlockSpec(3, 4), ConvBlockSpec(4, 4)))


def test_forward_collect_examples():
    spec = MlpSpec((6, 5, 3))
    zero = ModelParams([{"W": np.zeros((6, 5)), "b": np.zeros(5)}, {"W": np.zeros((5, 3)), "b": np.zeros(3)}])
    fwd = forward_collect(zero, np.ones((2, 6)))
    np.testing.assert_array_equal(fwd.post[-1], 0)
    np.testing.assert_allclose(softmax(fwd.post[-1]), 1 / 3)
    single = build_mlp(MlpSpec((6, 3)), make_rng(0), np.float64)
    x = make_rng(1).standard_normal((4, 6))
    np.testing.assert_array_equal(forward_collect(single, x).post[0], x @ single[0]["W"] + single[0]["b"])
    p = build_mlp(spec, make_rng(0))
    out = forward_collect(p, x.astype(np.float32))
    assert [a.shape for a in out.post] == [(4, 5), (4, 3)]
    with pytest.raises(DimensionError):
        forward_collect(p, np.ones((1, 7), np.float32))


def test_forward_collect_64bit_agreement():
    spec = MlpSpec((10, 20, 20, 4))
    p32 = build_mlp(spec, make_rng(2))
    x = make_rng(3).standard_normal((50, 10)).astype(np.float32)
    lo = forward_collect(p32, x).post[-1]
    hi = forward_collect(p32.astype(np.float64), x.astype(np.float64)).post[-1]
    np.testing.assert_allclose(lo, hi, rtol=1e-5, atol=1e-5)


def test_flops_examples():
    assert flops_forward(MlpSpec((3072, 2000, 2000, 2000, 10))) == 28_328_000
    assert flops_forward(MlpSpec((17, 10))) == 2 * 17 * 10
    spec = MlpSpec((8, 6, 4))
    assert flops_forward(spec, batch=2) == 2 * flops_forward(spec)
    # additive over layers
    assert flops_forward(spec) == flops_forward(MlpSpec((8, 6))) + flops_forward(MlpSpec((6, 4)))


def test_cascade_flops_and_params():
    spec = CascadeSpec((1, 4, 4), 3, (ConvBlockSpec(1, 2),))
    # conv 2*1*9*2*16 MACs->FLOPs, head 2*(2*2*2)*3
    assert flops_forward(spec) == 2 * 1 * 9 * 2 * 16 + 2 * 8 * 3
    assert param_count(spec) == build_cnn(spec, make_rng(0)).count() == (2 * 9 + 2) + (8 * 3 + 3)


def test_conv_identity_1x1():
    x = make_rng(0).standard_normal((2, 3, 5, 5))
    block = ConvBlockSpec(3, 3, kernel_size=1, padding=0, pool=None, activation="identity")
    params = {"W": np.eye(3).reshape(3, 3, 1, 1), "b": np.zeros(3)}
    np.testing.assert_allclose(conv_forward(block, params, x), x, atol=1e-12)


def test_conv_all_ones_constant_image():
    c = 4
    x = np.full((1, c, 6, 6), 1.0)
    out, _ = conv2d(x, np.ones((1, c, 3, 3)), np.zeros(1), 1, 1)
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c)
    assert out[0, 0, 0, 0] == 4 * c  # corner sees a 2x2 window


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_naive_oracle(stride, padding):
    rng = make_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out, _ = conv2d(x, w, b, stride, padding)
    np.testing.assert_allclose(out, conv2d_ref(x, w, b, stride, padding), rtol=1e-5, atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))


def test_maxpool_matches_oracle():
    x = make_rng(4).standard_normal((2, 3, 6, 6))
    out, _ = maxpool2d(x, 2)
    np.testing.assert_array_equal(out, maxpool_ref(x, 2))


def test_conv_block_forward_oracle():
    rng = make_rng(5)
    block = ConvBlockSpec(2, 3)
    params = build_cnn(CascadeSpec((2, 8, 8), 2, (block,)), rng, np.float64)[0]
    x = rng.standard_normal((2, 2, 8, 8))
    ref = maxpool_ref(np.maximum(conv2d_ref(x, params["W"], params["b"], 1, 1), 0), 2)
    np.testing.assert_allclose(conv_forward(block, params, x), ref, atol=1e-10)


def test_spec_dict_roundtrip():
    for spec in (MlpSpec((4, 3, 2), "identity"),
                 CascadeSpec((3, 8, 8), 5, (ConvBlockSpec(3, 4, pool="avg"), DenseBlockSpec(64, 7)))):
        assert spec_from_dict(spec_to_dict(spec)) == spec


def test_checkpoint_roundtrip(tmp_path):
    spec = MlpSpec((5, 4, 3))
    params = build_mlp(spec, make_rng(0))
    params[0]["M"] = np.arange(8, dtype=np.float32).reshape(4, 2)
    save_checkpoint(tmp_path / "m.fwdb", spec, params, {"seed": 3})
    spec2, params2, extra = load_checkpoint(tmp_path / "m.fwdb")
    assert spec2 == spec and extra == {"seed": 3}
    assert params2.equal(params)
    raw = (tmp_path / "m.fwdb").read_bytes()
    assert raw[:4] == b"FWDB" and int.from_bytes(raw[4:6], "little") == 1


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x")
