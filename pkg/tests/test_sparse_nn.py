import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_conv, dense_down, dense_up, random_instance
from sdpcc.nn import (
    ConvKernel,
    GradientTape,
    MissingLayerError,
    ModelWeights,
    TapeStateError,
    Var,
    WeightFormatError,
    WeightVersionError,
    down_conv_s2,
    irn_forward,
    irn_kernels,
    load_weights,
    relu,
    save_weights,
    sigmoid,
    sparse_conv,
    up_conv_s2,
)
from sdpcc.nn import functional as F
from sdpcc.nn.weights import ParamSet
from sdpcc.sparse_tensor import canonicalize, child_candidates, downsample_coords
from sdpcc.training import grad_check


def _tensor(coords, feats, depth=4):
    return canonicalize(coords, feats, depth)


def _kernel(rng, k, cin, cout, bias=True):
    w = rng.standard_normal((k**3, cin, cout)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32) if bias else None
    return ConvKernel(w, b)


def test_identity_k1():
    rng = np.random.default_rng(0)
    t = _tensor(*random_instance(rng))
    k = ConvKernel(np.eye(3, dtype=np.float32)[None], None)
    out = sparse_conv(t, k, t.coords)
    assert np.array_equal(out.feats, t.feats)


@pytest.mark.parametrize("ksize", [1, 3, 5, 9])
def test_conv_matches_dense(ksize):
    rng = np.random.default_rng(ksize)
    for _ in range(5):
        t = _tensor(*random_instance(rng))
        k = _kernel(rng, ksize, 3, 2)
        out = sparse_conv(t, k, t.coords)
        ref = dense_conv(t.coords, t.feats, k.weights, k.bias, t.coords, ksize)
        np.testing.assert_allclose(out.feats, ref, atol=1e-4)


def test_conv_on_target_coords_without_neighbours_is_bias():
    rng = np.random.default_rng(3)
    t = _tensor([(0, 0, 0), (1, 0, 0)], np.ones((2, 3), np.float32), 5)
    k = _kernel(rng, 3, 3, 2)
    out = sparse_conv(t, k, np.array([[10, 10, 10], [20, 0, 0]]))
    np.testing.assert_allclose(out.feats, np.tile(k.bias, (2, 1)))
    assert len(sparse_conv(t, k, np.zeros((0, 3)))) == 0


def test_conv_channel_mismatch():
    t = _tensor([(0, 0, 0)], np.ones((1, 2), np.float32))
    with pytest.raises(ValueError):
        sparse_conv(t, ConvKernel(np.zeros((1, 3, 1), np.float32)), t.coords)


def test_down_single_voxel_and_full_parent():
    w = np.arange(8, dtype=np.float32).reshape(8, 1, 1) + 1
    k = ConvKernel(w, np.array([0.5], np.float32))
    out = down_conv_s2(_tensor([(0, 0, 0)], np.array([[2.0]], np.float32)), k)
    assert out.coords.tolist() == [[0, 0, 0]] and out.feats[0, 0] == pytest.approx(2.5)
    kids = child_candidates(np.array([[1, 2, 3]]))
    t = _tensor(kids, np.full((8, 1), 3.0, np.float32))
    ones = ConvKernel(np.ones((8, 1, 1), np.float32), np.array([1.0], np.float32))
    out = down_conv_s2(t, ones)
    assert out.coords.tolist() == [[1, 2, 3]] and out.feats[0, 0] == pytest.approx(25.0)


def test_down_matches_dense_on_block():
    rng = np.random.default_rng(7)
    side = 6
    coords = np.argwhere(rng.random((side,) * 3) < 0.5)
    t = _tensor(coords, rng.standard_normal((len(coords), 3)).astype(np.float32))
    k = _kernel(rng, 2, 3, 4)
    out = down_conv_s2(t, k)
    assert out.coords.tolist() == downsample_coords(t).tolist()
    np.testing.assert_allclose(out.feats, dense_down(t.coords, t.feats, k.weights, k.bias, out.coords), atol=1e-4)


def test_up_per_octant_transform():
    rng = np.random.default_rng(8)
    t = _tensor([(2, 1, 0)], np.array([[1.0, -2.0]], np.float32))
    k = _kernel(rng, 2, 2, 2)
    out = up_conv_s2(t, k)
    kids, rows = dense_up(t.coords, t.feats, k.weights, k.bias)
    assert out.coords.tolist() == kids.tolist()
    np.testing.assert_allclose(out.feats, rows, atol=1e-5)
    empty = _tensor(np.zeros((0, 3)), np.zeros((0, 2), np.float32))
    assert len(up_conv_s2(empty, k)) == 0


def test_down_then_up_restores_complete_parents():
    kids = child_candidates(np.array([[0, 0, 0], [3, 1, 2]]))
    t = _tensor(kids, np.ones((16, 1), np.float32))
    rng = np.random.default_rng(9)
    back = up_conv_s2(down_conv_s2(t, _kernel(rng, 2, 1, 2)), _kernel(rng, 2, 2, 1))
    assert back.coords.tolist() == t.coords.tolist()


def test_irn_zero_weights_is_identity():
    rng = np.random.default_rng(1)
    ks = {name.split(".")[-1]: ConvKernel(np.zeros_like(k.weights), np.zeros_like(k.bias))
          for name, k in irn_kernels(rng, 8, "x").items()}
    t = _tensor(*random_instance(rng, cin=8))
    out = irn_forward(t, ks)
    assert np.array_equal(out.feats, t.feats) and np.array_equal(out.coords, t.coords)


def test_irn_single_voxel_matches_dense():
    rng = np.random.default_rng(2)
    ks = {name.split(".")[-1]: k for name, k in irn_kernels(rng, 8, "x").items()}
    for k in ks.values():
        k.bias[:] = rng.standard_normal(k.bias.shape)
    f = rng.standard_normal((1, 8)).astype(np.float32)
    t = _tensor([(1, 1, 1)], f)
    centre = {n: (k.weights[k.weights.shape[0] // 2], k.bias) for n, k in ks.items()}

    def lin(x, n):
        w, b = centre[n]
        return x @ w + b

    r = lambda x: np.maximum(x, 0)  # noqa: E731
    a = lin(f, "a")
    b = lin(r(lin(f, "b1")), "b2")
    c = lin(r(lin(r(lin(f, "c1")), "c2")), "c3")
    np.testing.assert_allclose(irn_forward(t, ks).feats, f + np.concatenate([a, b, c], axis=1), atol=1e-5)


def test_irn_width_mismatch():
    rng = np.random.default_rng(0)
    ks = {name.split(".")[-1]: k for name, k in irn_kernels(rng, 8, "x").items()}
    with pytest.raises(ValueError):
        irn_forward(_tensor([(0, 0, 0)], np.ones((1, 4), np.float32)), ks)


def test_activations():
    t = _tensor([(0, 0, 0), (1, 0, 0)], np.array([[-1.0], [2.0]], np.float32))
    assert relu(t).feats[:, 0].tolist() == [0.0, 2.0]
    z = _tensor([(0, 0, 0)], np.zeros((1, 1), np.float32))
    assert sigmoid(z).feats[0, 0] == 0.5


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_sigmoid_monotone(a, b):
    lo, hi = sorted((a, b))
    s = F.sigmoid(Var(np.array([lo, hi]))).value
    assert s[0] <= s[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linear_in_features(seed, a, b):
    rng = np.random.default_rng(seed)
    coords, f = random_instance(rng)
    g = rng.standard_normal(f.shape).astype(np.float32)
    k = _kernel(rng, 3, 3, 2, bias=False)
    conv = lambda x: sparse_conv(_tensor(coords, x), k, canonicalize(coords, None, 4).coords).feats  # noqa: E731
    np.testing.assert_allclose(conv(a * f + b * g), a * conv(f) + b * conv(g), atol=1e-3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6)))
def test_conv_translation_equivariant(seed, shift):
    rng = np.random.default_rng(seed)
    coords, f = random_instance(rng)
    k = _kernel(rng, 3, 3, 2, bias=False)
    t = _tensor(coords, f)
    moved = _tensor(coords + np.array(shift), f)
    out = sparse_conv(moved, k, moved.coords)
    # shifting reorders keys, so align rows through the unshifted coordinates
    back = canonicalize(out.coords - np.array(shift), out.feats, 4)
    assert np.allclose(sparse_conv(t, k, t.coords).feats, back.feats, atol=1e-5)


def test_backward_linear_case():
    rng = np.random.default_rng(4)
    coords, f = random_instance(rng, cin=2)
    t = _tensor(coords, f)
    x = Var(t.feats.astype(np.float64))
    w = Var(np.eye(2)[None], requires_grad=True)
    kmap = F.identity_map(len(t))
    with GradientTape() as tape:
        loss = F.total(F.conv(x, w, None, kmap))
    tape.backward(loss)
    np.testing.assert_allclose(w.grad[0], np.tile(t.feats.sum(axis=0)[:, None], (1, 2)), rtol=1e-6)


def test_zero_input_gives_zero_input_gradient():
    rng = np.random.default_rng(5)
    coords, f = random_instance(rng)
    t = _tensor(coords, np.zeros_like(f))
    from sdpcc.nn.layers import Coords

    at = Coords(t.keys, 4, t.coords)
    x = Var(t.feats.astype(np.float64), requires_grad=True)
    w = Var(rng.standard_normal((27, 3, 2)))
    with GradientTape() as tape:
        loss = F.total(F.relu(F.conv(x, w, None, at.same_map(3))))
    tape.backward(loss)
    assert not np.any(x.grad)


def test_backward_requires_recorded_forward():
    tape = GradientTape()
    with pytest.raises(TapeStateError):
        tape.backward(Var(np.array(1.0)))
    x = Var(np.ones(3), requires_grad=True)
    with GradientTape() as tape:
        loss = F.total(x)
    tape.backward(loss)
    with pytest.raises(TapeStateError):
        tape.backward(loss)


def test_grad_check_every_layer_kind():
    report = grad_check(seed=3)
    assert set(report) >= {"conv1", "conv3", "conv9", "conv_target", "down_s2", "up_s2", "relu", "irn"}
    assert max(report.values()) < 1e-3


def _weights(rng):
    ks = {"net.conv": _kernel(rng, 3, 2, 4), "net.head": ConvKernel(rng.standard_normal((1, 4, 1)).astype(np.float32))}
    return ModelWeights(ks, {"entropy.logits": rng.standard_normal((2, 5)).astype(np.float32)}, {"width": 4.0})


def test_weights_roundtrip(tmp_path):
    w = _weights(np.random.default_rng(0))
    save_weights(w, tmp_path / "w.sdpc")
    back = load_weights(tmp_path / "w.sdpc")
    assert back.to_bytes() == w.to_bytes()
    assert back.kernel("net.head").bias is None
    assert np.array_equal(back.kernel("net.conv").weights, w.kernel("net.conv").weights)
    assert back.config == {"width": 4.0}


def test_weights_corruption(tmp_path):
    data = bytearray(_weights(np.random.default_rng(0)).to_bytes())
    bad_magic = b"XXXX" + bytes(data[4:])
    with pytest.raises(WeightFormatError):
        ModelWeights.from_bytes(bad_magic)
    with pytest.raises(WeightFormatError):
        ModelWeights.from_bytes(bytes(data[:-10]))
    flipped = bytearray(data)
    flipped[40] ^= 1
    with pytest.raises(WeightFormatError):
        ModelWeights.from_bytes(bytes(flipped))


def test_weights_unknown_version():
    w = _weights(np.random.default_rng(0))
    w.version = 99
    with pytest.raises(WeightVersionError):
        ModelWeights.from_bytes(w.to_bytes())


def test_missing_layer():
    w = _weights(np.random.default_rng(0))
    with pytest.raises(MissingLayerError):
        w.kernel("extractor.down0")
    with pytest.raises(MissingLayerError):
        ParamSet.from_weights(w, False).conv("sopa8.fuse")
