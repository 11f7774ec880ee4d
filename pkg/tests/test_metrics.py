import numpy as np
import pytest

from isquant import zoo
from isquant.bnfold import fold_bn
from isquant.engine import quantize_graph
from isquant.errors import EvalError
from isquant.graph import Node, make_graph
from isquant.metrics import (EvalReport, accuracy, compare_roundings, error_norms, evaluate,
                             model_info, param_counts, time_calibration)


def test_accuracy():
    out = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]])
    assert accuracy(out, [1, 0, 0]) == pytest.approx(200 / 3)
    with pytest.raises(EvalError):
        accuracy(out, [1, 0])
    with pytest.raises(EvalError):
        accuracy(out, [1, 0, 5])


def test_error_norms():
    n = error_norms([1.0, 2.0], [1.0, 0.0])
    assert n == {"linf": 2.0, "l2": 2.0, "mean_abs": 1.0}


def test_evaluate_tinycnn():
    qg = quantize_graph(zoo.load_tinycnn())
    x, y = zoo.eval_set()
    rep = evaluate(qg, (x[:200], y[:200]))
    assert set(rep.accuracy) == {"float", "fake", "int"}
    assert rep.delta["float"] == 0.0
    assert rep.parity["bit_exact"] and rep.parity["same_predictions"]
    assert "timing" not in rep.to_dict()
    assert EvalReport.from_dict(rep.to_dict()) == rep
    assert "fake" in rep.table() and "int" in rep.table()


def test_evaluate_float_only():
    x, y = zoo.eval_set()
    rep = evaluate(zoo.load_tinycnn(), (x[:50], y[:50]))
    assert list(rep.accuracy) == ["float"]
    assert "float" in rep.table()


def test_evaluate_everything_wrong():
    g = make_graph("z", [1, 3], [Node("fc", "fc", ("input",), {}, {"weight": "w"})],
                   {"w": np.array([[1, 0, 0], [0, 0, 0]], np.float32)})
    x = np.tile(np.array([[1.0, 0.0, 0.0]], np.float32), (10, 1))
    y = np.ones(10, np.int64)
    rep = evaluate(quantize_graph(g, calib_batches=2), (x, y))
    assert all(v == 0.0 for v in rep.accuracy.values())
    assert all(v == 0.0 for v in rep.delta.values())


def test_evaluate_errors():
    qg = quantize_graph(zoo.load_tinycnn())
    x, y = zoo.eval_set()
    with pytest.raises(EvalError):
        evaluate(qg, (x[:0], y[:0]))
    with pytest.raises(EvalError):
        evaluate(qg, (x[:, :, :8, :8], y))
    with pytest.raises(EvalError):
        evaluate(zoo.load_tinycnn(), (x, y), paths=["int"])


def test_compare_rows():
    x, y = zoo.eval_set()
    rows = compare_roundings(zoo.load_tinycnn(), [6, 8], (x[:200], y[:200]))
    assert [(r["bits"], r["rounding"]) for r in rows] == [
        (6, "nearest"), (6, "squant"), (8, "nearest"), (8, "squant")]
    for r in rows:
        assert r["delta"] == pytest.approx(r["baseline"] - r["quantized"])
    assert rows[1]["max_kernel_ase"] <= rows[0]["max_kernel_ase"]
    with pytest.raises(EvalError):
        compare_roundings(zoo.load_tinycnn(), [3], (x, y))


def test_time_calibration():
    g = fold_bn(zoo.load_tinycnn())
    t = time_calibration(g, repeats=2)
    assert t["layers"] == 4 and t["total_ms"] >= 0
    empty = make_graph("e", [1, 1, 2, 2], [Node("r", "relu", ("input",))], {})
    assert time_calibration(empty)["total_ms"] == 0.0
    with pytest.raises(EvalError):
        time_calibration(zoo.load_tinycnn())


def test_param_counts_and_info():
    g = fold_bn(zoo.load_tinycnn())
    pc = param_counts(g)
    assert pc["symmetric/per_channel"]["weight_scales"] - pc["symmetric/per_tensor"][
        "weight_scales"] == (8 + 16 + 16 + 6) - 4
    assert pc["asymmetric/per_tensor"]["total"] == 2 * pc["symmetric/per_tensor"]["total"]
    info = model_info(zoo.load_tinycnn())
    assert info["layers"] == 4
    assert info["ops"]["int"]["mults"] == info["ops"]["float"]["mults"]
