import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from isquant import zoo
from isquant.errors import GraphError
from isquant.graph import Node, load_model, make_graph, save_model, shape_inference

CORPUS = Path(__file__).parent / "data" / "error_corpus"


def _write_minimal(root: Path):
    from isquant.tensor import write_blob

    write_blob(root / "w.bin", np.ones((2, 1, 3, 3), np.float32))
    doc = {"name": "mini", "input": {"shape": [1, 1, 6, 6]},
           "nodes": [{"id": "c", "kind": "conv2d", "inputs": ["input"], "attrs": {},
                      "params": {"weight": "w"}},
                     {"id": "r", "kind": "relu", "inputs": ["c"]}],
           "params": [{"name": "w", "dtype": "f32", "shape": [2, 1, 3, 3], "file": "w.bin"}]}
    (root / "m.json").write_text(json.dumps(doc))
    return root / "m.json"


def test_minimal_manifest(tmp_path):
    g = load_model(_write_minimal(tmp_path))
    assert [n.kind for n in g.nodes] == ["conv2d", "relu"]
    assert g.output == "r"


@pytest.mark.parametrize("case", sorted(p.stem for p in CORPUS.glob("*.json")))
def test_error_corpus(case, tmp_path):
    for f in CORPUS.iterdir():
        shutil.copy(f, tmp_path / f.name)
    with pytest.raises(GraphError) as exc:
        load_model(tmp_path / f"{case}.json")
    assert exc.value.code == case
    if case == "missing_blob":
        assert "gone.bin" in exc.value.message


def test_not_found(tmp_path):
    with pytest.raises(GraphError) as exc:
        load_model(tmp_path / "nope.json")
    assert exc.value.code == "not_found"


def test_empty_params_roundtrip(tmp_path):
    g = make_graph("r", [1, 2, 3, 3], [Node("r", "relu", ("input",))], {})
    save_model(g, tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["params"] == []
    assert load_model(tmp_path / "r.json") == g


def test_bn_fields_in_manifest(tmp_path):
    g = zoo.load_tinycnn()
    save_model(g, tmp_path / "t.json")
    doc = json.loads((tmp_path / "t.json").read_text())
    bn = next(n for n in doc["nodes"] if n["kind"] == "batchnorm")
    assert set(bn["params"]) == {"gamma", "beta", "mean", "var"}
    assert "epsilon" in bn["attrs"]


def test_tinycnn_fixpoint(tmp_path):
    g = zoo.load_tinycnn()
    save_model(g, tmp_path / "a" / "t.json")
    g2 = load_model(tmp_path / "a" / "t.json")
    assert g2 == g
    save_model(g2, tmp_path / "b" / "t.json")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_shape_worked_example():
    w = np.ones((1, 1, 2, 2), np.float32)
    g = make_graph("ex", [1, 1, 3, 3], [Node("c", "conv2d", ("input",), {}, {"weight": "w"})],
                   {"w": w})
    assert shape_inference(g, (1, 1, 3, 3))["c"] == (1, 1, 2, 2)


def test_shape_gap_and_batch_free():
    g = make_graph("gap", [1, 3, 5, 7], [Node("p", "globalavgpool", ("input",))], {})
    assert shape_inference(g, (4, 3, 5, 7))["p"] == (4, 3, 1, 1)
    with pytest.raises(GraphError):
        shape_inference(g, (4, 2, 5, 7))


def test_tinycnn_shape_table():
    s = shape_inference(zoo.load_tinycnn(), (2, 1, 16, 16))
    assert s["conv1"] == (2, 8, 16, 16)
    assert s["conv2"] == (2, 16, 8, 8)
    assert s["conv3"] == (2, 16, 4, 4)
    assert s["pool"] == (2, 16, 2, 2)
    assert s["flat"] == (2, 64)
    assert s["fc"] == (2, 6)


def test_nodes_are_toposorted():
    w = np.ones((1, 1, 1, 1), np.float32)
    nodes = [Node("r", "relu", ("c",)), Node("c", "conv2d", ("input",), {}, {"weight": "w"})]
    g = make_graph("t", [1, 1, 2, 2], nodes, {"w": w}, output="r")
    assert [n.id for n in g.nodes] == ["c", "r"]


def test_random_graphs_are_valid():
    rng = np.random.default_rng(0)
    for _ in range(30):
        g = zoo.random_graph(rng, bn=True)
        assert 1 <= len(g.layers()) <= 6
        shape_inference(g, g.input_shape)
