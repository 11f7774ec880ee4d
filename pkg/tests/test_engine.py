from pathlib import Path

import numpy as np
import pytest

from isquant import zoo
from isquant.bnfold import fold_bn
from isquant.engine import (FAKE, INT_AFFINE, INT_SYM, QuantizedGraph, affine_terms, count_ops,
                            load_quantized, quantize_graph, run_fake_quant, run_float,
                            run_int_affine, run_int_symmetric, run_path, save_quantized)
from isquant.errors import EngineError
from isquant.graph import Node, make_graph
from isquant.quantizer import AFFINE, PER_CHANNEL, SCALE, QuantParams
from isquant.tensor import read_blob

GOLDEN = Path(__file__).parent / "data" / "golden"


def _p(s, alpha, signed=True):
    return QuantParams(SCALE, "per_tensor", 8, signed, (float(s),), (0,), (float(alpha),), (0.0,))


def _hand_qg(s, wcodes, bias=None):
    """Single 2x2 conv on a 1x1x3x3 input with hand-picked grids."""
    w = (np.asarray(wcodes, np.float32) / s).reshape(1, 1, 2, 2)
    g = make_graph("hand", [1, 1, 3, 3],
                   [Node("c", "conv2d", ("input",), {}, {"weight": "w", "bias": "b"})],
                   {"w": w, "b": np.zeros(1, np.float32) if bias is None else bias})
    wp = _p(s, 127 / s)
    b = np.zeros(1, np.int64)
    return QuantizedGraph(g, 8, SCALE, "per_tensor", "nearest",
                          {"c": np.asarray(wcodes, np.int64).reshape(1, 1, 2, 2)}, {"c": wp},
                          {"c": b}, {"input": _p(s, 127 / s), "c": _p(1.0, 127.0)})


def test_hand_worksheet():
    qg = _hand_qg(10.0, [1, 2, 3, 4])
    x = (np.arange(1, 10, dtype=np.float32) / 10).reshape(1, 1, 3, 3)
    want = np.array([[0.37, 0.47], [0.67, 0.77]])
    for run in (run_fake_quant, run_int_symmetric):
        np.testing.assert_allclose(run(qg, x).data[0, 0], want, rtol=1e-6)
    _, codes = run_int_symmetric(qg, x, trace=True)
    assert codes["c"][0, 0].tolist() == [[37, 47], [67, 77]]


def test_grid_aligned_equals_float():
    qg = _hand_qg(4.0, [1, -2, 3, 4])
    x = (np.array([1, 2, -3, 4, 5, 6, -7, 8, 9], np.float32) / 4).reshape(1, 1, 3, 3)
    assert np.array_equal(run_fake_quant(qg, x).data, run_float(qg.graph, x).data)
    assert np.array_equal(run_int_symmetric(qg, x).data, run_float(qg.graph, x).data)


def test_identity_conv():
    g = make_graph("id", [1, 2, 4, 4], [Node("c", "conv2d", ("input",), {},
                                              {"weight": "w"})],
                   {"w": np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)})
    x = np.random.default_rng(0).standard_normal((3, 2, 4, 4)).astype(np.float32)
    assert np.array_equal(run_float(g, x).data, x)


def test_zero_input_gives_bias():
    g = fold_bn(zoo.load_tinycnn())
    fc_only = make_graph("fc", [1, 64], [Node("fc", "fc", ("input",), {},
                                              {"weight": "w", "bias": "b"})],
                         {"w": g.param(g.node("fc"), "weight"),
                          "b": g.param(g.node("fc"), "bias")})
    qg = quantize_graph(fc_only)
    y = run_int_symmetric(qg, np.zeros((1, 64), np.float32)).data[0]
    px, pw = qg.act["input"], qg.weight_params["fc"]
    np.testing.assert_allclose(y, fc_only.param(fc_only.node("fc"), "bias"),
                               atol=0.5 / (px.s * pw.s) + 1e-7)
    assert np.array_equal(y, (qg.bias["fc"] / (px.s * pw.s)).astype(np.float32))


def test_golden_outputs():
    g = zoo.load_tinycnn()
    x = read_blob(GOLDEN / "tinycnn_input.bin")
    np.testing.assert_allclose(run_float(g, x).data, read_blob(GOLDEN / "tinycnn_float.bin"),
                               atol=1e-5)
    qg = quantize_graph(g)
    assert np.array_equal(run_int_symmetric(qg, x).data, read_blob(GOLDEN / "tinycnn_int8.bin"))


def test_float_matches_direct_oracle_on_random_graphs():
    from oracles import run_graph_direct

    rng = np.random.default_rng(11)
    for _ in range(15):
        g = zoo.random_graph(rng, bn=True, max_hw=7)
        x = rng.standard_normal((2,) + tuple(g.input_shape[1:])).astype(np.float32)
        np.testing.assert_allclose(run_float(g, x).data, run_graph_direct(g, x),
                                   rtol=1e-4, atol=1e-4)


def test_p3_for_2x2_kernel():
    rng = np.random.default_rng(0)
    xq = rng.integers(-128, 128, (1, 1, 3, 3))
    wq = rng.integers(-128, 128, (1, 1, 2, 2))
    t = affine_terms(xq, wq, 5, -3)
    assert t.p3.ravel().tolist() == [4 * 5 * -3]
    t0 = affine_terms(xq, wq, 0, 0)
    assert not t0.p1.any() and not t0.p2.any() and not t0.p3.any()
    assert np.array_equal(t0.combine(), t0.p0)


def test_affine_expansion_fc():
    rng = np.random.default_rng(1)
    xq = rng.integers(-128, 128, (3, 7))
    wq = rng.integers(-128, 128, (4, 7))
    zx, zw = 9, rng.integers(-20, 20, 4)
    t = affine_terms(xq, wq, zx, zw, "fc")
    assert np.array_equal(t.combine(), (xq - zx) @ (wq - zw[:, None]).T)


def test_affine_and_symmetric_paths():
    g = zoo.load_tinycnn()
    x, _ = zoo.eval_set()
    x = x[:32]
    qs = quantize_graph(g)
    ya, terms = run_int_affine(qs, x)
    assert np.array_equal(ya.data, run_int_symmetric(qs, x).data)
    assert set(terms) == {"conv1", "conv2", "conv3", "fc"}
    qa = quantize_graph(g, scheme=AFFINE, granularity=PER_CHANNEL)
    assert not qa.symmetric
    with pytest.raises(EngineError) as exc:
        run_int_symmetric(qa, x)
    assert exc.value.code == "nonzero_zero_point"
    assert np.array_equal(run_int_affine(qa, x)[0].data, run_fake_quant(qa, x).data)


def test_bits_trend():
    g = zoo.load_tinycnn()
    x, _ = zoo.eval_set()
    x = x[:200]
    ref = run_float(g, x).data
    err = {b: float(np.abs(run_int_symmetric(quantize_graph(g, bits=b), x).data - ref).mean())
           for b in (4, 6, 8)}
    assert err[8] < err[6] < err[4]


def test_count_ops_tinycnn():
    g = zoo.load_tinycnn()
    sym = count_ops(quantize_graph(g), INT_SYM)
    assert sym.mults == 8 * 16 * 16 * 9 + 16 * 8 * 8 * 72 + 16 * 4 * 4 * 144 + 6 * 64
    assert sym.weight_scales == 4 and sym.weight_zero_points == 0 and sym.act_zero_points == 0
    pc = count_ops(quantize_graph(g, granularity=PER_CHANNEL), INT_SYM)
    assert pc.weight_scales == 8 + 16 + 16 + 6
    aff = count_ops(quantize_graph(g, scheme=AFFINE), INT_AFFINE)
    assert aff.mults > sym.mults and aff.adds > sym.adds
    assert aff.weight_zero_points == 4 and aff.act_zero_points == aff.act_scales


def test_save_load_quantized(tmp_path):
    qg = quantize_graph(zoo.load_tinycnn(), bits=7)
    save_quantized(qg, tmp_path / "model.json")
    back = load_quantized(tmp_path / "model.json")
    assert back == qg
    x, _ = zoo.eval_set()
    assert np.array_equal(run_path(FAKE, back, x[:16]).data, run_path(FAKE, qg, x[:16]).data)


def test_threads_do_not_change_results(monkeypatch):
    qg = quantize_graph(zoo.load_tinycnn())
    x, _ = zoo.eval_set()
    x = x[:64]
    monkeypatch.setenv("ISQ_THREADS", "1")
    a = run_int_symmetric(qg, x).data
    monkeypatch.setenv("ISQ_THREADS", "4")
    assert np.array_equal(a, run_int_symmetric(qg, x).data)


def test_engine_rejects_unfolded_bn():
    g = zoo.load_tinycnn()
    qg = quantize_graph(g)
    with pytest.raises(EngineError):
        QuantizedGraph(g, 8, SCALE, "per_tensor", "squant", qg.weights, qg.weight_params,
                       qg.bias, qg.act)
