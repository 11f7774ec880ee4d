import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isquant.errors import QuantError
from isquant.graph import Node, make_graph
from isquant.quantizer import (AFFINE, PER_CHANNEL, SCALE, QuantParams, calibrate_activations,
                               compute_params, dequantize, dequantize_array, qrange, quantize,
                               quantize_array, round_half_away)
from isquant.tensor import TensorF, TensorQ

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def test_round_half_away():
    a = np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49999999999999994, 2.4999999])
    assert round_half_away(a).tolist() == [1, 2, 3, -1, -2, 0, 2]


def test_ranges():
    assert qrange(8, SCALE, True) == (-127, 127)
    assert qrange(8, AFFINE, True) == (-128, 127)
    assert qrange(8, SCALE, False) == (0, 255)
    assert qrange(4, SCALE, True) == (-7, 7)


def test_affine_symmetric_range_zero_point():
    ps = compute_params(np.array([-1.0, 1.0], np.float32), 8, AFFINE, signed=True)
    assert ps.s == 127.5
    assert ps.z == 0


def test_scale_unsigned_255():
    p = compute_params(np.array([0.0, 255.0], np.float32), 8, SCALE, signed=False)
    assert p.s == 1.0 and p.z == 0


def test_quantize_examples():
    p = compute_params(np.array([-127.0, 127.0], np.float32), 8, SCALE)
    assert p.s == 1.0
    q = quantize(TensorF(np.array([0.0, 3.4, 200.0, -200.0], np.float32)), p)
    assert q.data.tolist() == [0, 3, 127, -127]
    assert dequantize(TensorQ(np.array([0]), -127, 127), p).data[0] == 0.0
    p127 = compute_params(np.array([1.0], np.float32), 8, SCALE)
    assert p127.s == 127.0
    assert dequantize(TensorQ(np.array([127]), -127, 127), p127).data[0] == 1.0


def test_degenerate():
    z = np.zeros(5, np.float32)
    with pytest.raises(QuantError) as exc:
        compute_params(z)
    assert exc.value.code == "degenerate_range"
    p = compute_params(z, allow_degenerate=True)
    assert p.s == 1.0 and p.z == 0


def test_bad_inputs():
    with pytest.raises(QuantError):
        compute_params(np.ones(3), bits=9)
    with pytest.raises(QuantError):
        compute_params(np.ones(3), scheme="log")
    with pytest.raises(QuantError):
        compute_params(np.array([-1.0, 1.0]), signed=False, scheme=SCALE)


def test_params_dict_roundtrip():
    p = compute_params(np.random.default_rng(0).standard_normal((3, 4)), 6, AFFINE, PER_CHANNEL)
    assert QuantParams.from_dict(p.to_dict()) == p


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 40), elements=finite), st.integers(2, 8))
def test_scale_odd_symmetry_and_zero(x, bits):
    assume(np.abs(x).max() > 1e-6)
    p = compute_params(x, bits, SCALE)
    assert p.z == 0
    assert np.array_equal(quantize_array(-x, p), -quantize_array(x, p))
    assert quantize_array(np.zeros(1, np.float32), p)[0] == 0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(2, 40), elements=finite), st.integers(2, 8),
       st.sampled_from([SCALE, AFFINE]))
def test_monotone_and_in_range(x, bits, scheme):
    assume(np.ptp(x) > 1e-6 or np.abs(x).max() > 1e-6)
    p = compute_params(x, bits, scheme)
    xs = np.sort(x)
    q = quantize_array(xs, p)
    assert np.all(np.diff(q) >= 0)
    assert q.min() >= p.lo and q.max() <= p.hi


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 40), elements=finite), st.integers(2, 8),
       st.sampled_from([SCALE, AFFINE]))
def test_roundtrip_within_half_step(x, bits, scheme):
    assume(np.abs(x).max() > 1e-3)
    p = compute_params(x, bits, scheme)
    q = quantize_array(x, p)
    # exact in f64: f32 * f32 products carry no rounding
    assert np.abs(x.astype(np.float64) * p.s - (q - p.z)).max() <= 0.5


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite),
       st.sampled_from([SCALE, AFFINE]))
def test_per_channel_equals_slice(w, scheme):
    assume(all(np.abs(r).max() > 1e-3 for r in w))
    pc = compute_params(w, 8, scheme, PER_CHANNEL)
    q = quantize_array(w, pc)
    for c in range(w.shape[0]):
        pt = compute_params(w[c], 8, scheme)
        assert pc.channel(c).s == pt.s and pc.channel(c).z == pt.z
        assert np.array_equal(q[c], quantize_array(w[c], pt))
        np.testing.assert_array_equal(dequantize_array(q, pc)[c], dequantize_array(q[c], pt))


def _relu_graph():
    return make_graph("r", [1, 3, 4, 4], [Node("r", "relu", ("input",))], {})


def test_calibrate_relu_unsigned():
    act = calibrate_activations(_relu_graph(), n_batches=8, seed=0)
    p = act["r"]
    assert not p.signed and p.beta[0] == 0.0 and p.alpha[0] > 1.0
    assert act["input"].signed


def test_calibrate_deterministic():
    a = calibrate_activations(_relu_graph(), n_batches=4, seed=7)
    b = calibrate_activations(_relu_graph(), n_batches=4, seed=7)
    c = calibrate_activations(_relu_graph(), n_batches=4, seed=8)
    assert a == b and a != c
