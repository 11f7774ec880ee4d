"""Small CNN graphs: manifest loading/saving, validation and shape inference.

Manifest layout (JSON)::

    {"name": ..., "input": {"shape": [N, C, H, W]},
     "nodes": [{"id", "kind", "attrs", "inputs", "params"}, ...],
     "params": [{"name", "dtype", "shape", "file"}, ...],
     "output": <node id>}

``params`` of a node maps a role (``weight``, ``bias``, ``gamma`` ...) to a
parameter name. Blobs live next to the manifest. The graph input is referenced
by the reserved id ``"input"``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GraphError, IsqError
from .tensor import TensorF, check_shape, conv_output_hw, read_blob, write_blob

INPUT_ID = "input"

KINDS = ("conv2d", "fc", "batchnorm", "relu", "maxpool", "avgpool",
         "globalavgpool", "add", "flatten")

# role -> required?
PARAM_ROLES = {
    "conv2d": {"weight": True, "bias": False},
    "fc": {"weight": True, "bias": False},
    "batchnorm": {"gamma": True, "beta": True, "mean": True, "var": True},
}
ARITY = {"add": 2}

DEFAULT_BN_EPS = 1e-5


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    # attrs accessors with manifest defaults
    @property
    def stride(self):
        s = self.attrs.get("stride", 1 if self.kind == "conv2d" else self.attrs.get("k", 1))
        return _pair(s)

    @property
    def pad(self):
        return _pair(self.attrs.get("pad", 0))

    @property
    def kernel(self):
        return _pair(self.attrs.get("k", 1))

    @property
    def epsilon(self):
        return float(self.attrs.get("epsilon", DEFAULT_BN_EPS))


def _pair(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise GraphError("schema", f"expected an int pair, got {v!r}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


@dataclass(frozen=True, eq=False)
class Graph:
    name: str
    input_shape: tuple
    nodes: tuple
    params: dict
    output: str

    def node(self, node_id) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise GraphError("dangling_reference", f"no node {node_id!r}")

    def consumers(self, node_id):
        return [n for n in self.nodes if node_id in n.inputs]

    def param(self, node: Node, role) -> np.ndarray | None:
        name = node.params.get(role)
        return None if name is None else self.params[name].data

    def layers(self):
        """Conv and FC nodes, in order."""
        return [n for n in self.nodes if n.kind in ("conv2d", "fc")]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.name == other.name and self.input_shape == other.input_shape
                and self.nodes == other.nodes and self.output == other.output
                and self.params.keys() == other.params.keys()
                and all(self.params[k] == other.params[k] for k in self.params))

    __hash__ = None


def make_graph(name, input_shape, nodes, params, output=None) -> Graph:
    """Build and fully validate a graph from in-memory parts."""
    params = {k: v if isinstance(v, TensorF) else TensorF(v) for k, v in params.items()}
    nodes = _toposort([_check_node(n) for n in nodes])
    if output is None:
        output = nodes[-1].id if nodes else INPUT_ID
    g = Graph(name=str(name), input_shape=check_shape(input_shape), nodes=tuple(nodes),
              params=params, output=output)
    validate(g)
    return g


def _check_node(n: Node) -> Node:
    attrs = {k: list(v) if isinstance(v, tuple) else v for k, v in n.attrs.items()}
    n = Node(str(n.id), n.kind, tuple(n.inputs), attrs, dict(n.params))
    if n.kind not in KINDS:
        raise GraphError("unknown_kind", f"node {n.id!r}: unknown kind {n.kind!r}")
    if n.id == INPUT_ID:
        raise GraphError("schema", f"node id {INPUT_ID!r} is reserved")
    want = ARITY.get(n.kind, 1)
    if len(n.inputs) != want:
        raise GraphError("schema", f"node {n.id!r} ({n.kind}) takes {want} input(s), "
                         f"got {len(n.inputs)}")
    roles = PARAM_ROLES.get(n.kind, {})
    for role in n.params:
        if role not in roles:
            raise GraphError("schema", f"node {n.id!r}: unexpected param role {role!r}")
    for role, required in roles.items():
        if required and role not in n.params:
            raise GraphError("schema", f"node {n.id!r}: missing param {role!r}")
    if n.kind == "conv2d" and int(n.attrs.get("groups", 1)) != 1:
        raise GraphError("schema", f"node {n.id!r}: only groups=1 is supported")
    if n.kind == "batchnorm" and not n.epsilon > 0:
        raise GraphError("schema", f"node {n.id!r}: epsilon must be > 0")
    try:
        n.stride, n.pad, n.kernel
    except (TypeError, ValueError) as exc:
        raise GraphError("schema", f"node {n.id!r}: bad attrs: {exc}") from None
    if min(n.stride) < 1 or min(n.kernel) < 1 or min(n.pad) < 0:
        raise GraphError("schema", f"node {n.id!r}: stride/k must be >= 1 and pad >= 0")
    return n


def _toposort(nodes):
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise GraphError("schema", "duplicate node ids")
    by_id = {n.id: n for n in nodes}
    for n in nodes:
        for src in n.inputs:
            if src != INPUT_ID and src not in by_id:
                raise GraphError("dangling_reference",
                                 f"node {n.id!r} references undefined id {src!r}")
    done = {INPUT_ID}
    order = []
    pending = list(nodes)
    while pending:
        ready = [n for n in pending if all(s in done for s in n.inputs)]
        if not ready:
            raise GraphError("cyclic", "graph contains a cycle: "
                             + ", ".join(n.id for n in pending))
        # stable: keep manifest order among ready nodes
        n = ready[0]
        order.append(n)
        done.add(n.id)
        pending.remove(n)
    return order


def validate(g: Graph) -> None:
    if g.output != INPUT_ID and g.output not in {n.id for n in g.nodes}:
        raise GraphError("dangling_reference", f"output {g.output!r} is not a node")
    for n in g.nodes:
        for role, pname in n.params.items():
            if pname not in g.params:
                raise GraphError("dangling_reference",
                                 f"node {n.id!r} references missing param {pname!r}")
    shape_inference(g, g.input_shape)


def shape_inference(g: Graph, input_shape) -> dict:
    """Output shape of every node (and of ``"input"``)."""
    input_shape = check_shape(input_shape)
    if input_shape[1:] != g.input_shape[1:]:
        raise GraphError("shape_mismatch",
                         f"input shape {input_shape} incompatible with {g.input_shape}")
    shapes = {INPUT_ID: input_shape}
    for n in g.nodes:
        ins = [shapes[s] for s in n.inputs]
        shapes[n.id] = _node_shape(g, n, ins)
        if any(d < 1 for d in shapes[n.id]):
            raise GraphError("shape_mismatch", f"node {n.id!r}: output shape "
                             f"{shapes[n.id]} has a dim < 1")
    return shapes


def _need_rank(n, s, rank):
    if len(s) != rank:
        raise GraphError("shape_mismatch", f"node {n.id!r} ({n.kind}) expects rank-{rank} "
                         f"input, got {s}")


def _node_shape(g, n, ins):
    s = ins[0]
    if n.kind == "conv2d":
        _need_rank(n, s, 4)
        w = g.params[n.params["weight"]].shape
        if len(w) != 4 or w[1] != s[1]:
            raise GraphError("shape_mismatch", f"node {n.id!r}: weight {w} vs input {s}")
        _check_bias(g, n, w[0])
        ho, wo = conv_output_hw(s[2], s[3], w[2], w[3], n.stride, n.pad)
        return (s[0], w[0], ho, wo)
    if n.kind == "fc":
        _need_rank(n, s, 2)
        w = g.params[n.params["weight"]].shape
        if len(w) != 2 or w[1] != s[1]:
            raise GraphError("shape_mismatch", f"node {n.id!r}: weight {w} vs input {s}")
        _check_bias(g, n, w[0])
        return (s[0], w[0])
    if n.kind == "batchnorm":
        if len(s) not in (2, 4):
            raise GraphError("shape_mismatch", f"node {n.id!r}: batchnorm on rank {len(s)}")
        for role in ("gamma", "beta", "mean", "var"):
            shp = g.params[n.params[role]].shape
            if shp != (s[1],):
                raise GraphError("shape_mismatch",
                                 f"node {n.id!r}: {role} shape {shp} != ({s[1]},)")
        if np.any(g.params[n.params["var"]].data < 0):
            raise GraphError("schema", f"node {n.id!r}: negative variance")
        return s
    if n.kind in ("maxpool", "avgpool"):
        _need_rank(n, s, 4)
        (kh, kw), st = n.kernel, n.stride
        ho, wo = conv_output_hw(s[2], s[3], kh, kw, st, (0, 0))
        return (s[0], s[1], ho, wo)
    if n.kind == "globalavgpool":
        _need_rank(n, s, 4)
        return (s[0], s[1], 1, 1)
    if n.kind == "flatten":
        return (s[0], int(np.prod(s[1:])))
    if n.kind == "add":
        if ins[0] != ins[1]:
            raise GraphError("shape_mismatch", f"node {n.id!r}: add operands {ins[0]} vs {ins[1]}")
        return s
    return s  # relu


def _check_bias(g, n, out_ch):
    if "bias" in n.params:
        shp = g.params[n.params["bias"]].shape
        if shp != (out_ch,):
            raise GraphError("shape_mismatch", f"node {n.id!r}: bias shape {shp} != ({out_ch},)")


# --- manifest I/O -------------------------------------------------------------

_DTYPE_NAMES = {"f32": np.float32, "i8": np.int8, "i32": np.int32}


def _require(d, key, typ, where):
    if not isinstance(d, dict) or key not in d:
        raise GraphError("schema", f"{where}: missing field {key!r}")
    v = d[key]
    if not isinstance(v, typ) or isinstance(v, bool) and typ is not bool:
        raise GraphError("schema", f"{where}: field {key!r} has wrong type")
    return v


def read_manifest(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise GraphError("not_found", f"manifest not found: {path}") from None
    except OSError as exc:
        raise GraphError("io", f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError("bad_json", f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise GraphError("schema", f"{path}: top level must be an object")
    return doc


def load_params(doc, root: Path, dtypes=("f32",)):
    out = {}
    for i, p in enumerate(_require(doc, "params", list, "manifest")):
        where = f"params[{i}]"
        name = _require(p, "name", str, where)
        dtype = _require(p, "dtype", str, where)
        shape = _require(p, "shape", list, where)
        fname = _require(p, "file", str, where)
        if dtype not in dtypes:
            raise GraphError("schema", f"{where}: dtype {dtype!r} not allowed here")
        if name in out:
            raise GraphError("schema", f"duplicate param {name!r}")
        blob = root / fname
        if not blob.is_file():
            raise GraphError("missing_blob", f"param {name!r}: blob file {fname!r} not found")
        try:
            arr = read_blob(blob)
        except IsqError as exc:
            raise GraphError("bad_blob", f"param {name!r}: {exc.message}") from None
        if arr.dtype != _DTYPE_NAMES[dtype] or list(arr.shape) != shape:
            raise GraphError("shape_mismatch", f"param {name!r}: blob is {arr.dtype}{arr.shape}, "
                             f"manifest says {dtype}{shape}")
        out[name] = arr
    return out


def graph_from_doc(doc, root: Path) -> Graph:
    name = _require(doc, "name", str, "manifest")
    inp = _require(doc, "input", dict, "manifest")
    shape = _require(inp, "shape", list, "input")
    nodes = []
    for i, nd in enumerate(_require(doc, "nodes", list, "manifest")):
        where = f"nodes[{i}]"
        nid = _require(nd, "id", str, where)
        kind = _require(nd, "kind", str, where)
        attrs = nd.get("attrs", {})
        inputs = _require(nd, "inputs", list, where)
        params = nd.get("params", {})
        if not isinstance(attrs, dict) or not isinstance(params, dict):
            raise GraphError("schema", f"{where}: attrs/params must be objects")
        if not all(isinstance(s, str) for s in inputs):
            raise GraphError("schema", f"{where}: inputs must be strings")
        nodes.append(Node(nid, kind, tuple(inputs), dict(attrs), dict(params)))
    raw = load_params(doc, root)
    try:
        params = {k: TensorF(v) for k, v in raw.items()}
        return make_graph(name, shape, nodes, params, doc.get("output"))
    except GraphError:
        raise
    except IsqError as exc:
        raise GraphError("schema", exc.message) from None
    except (TypeError, ValueError, KeyError) as exc:
        raise GraphError("schema", f"malformed manifest: {exc}") from None


def load_model(path) -> Graph:
    path = Path(path)
    return graph_from_doc(read_manifest(path), path.parent)


def blob_filename(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def params_doc(params: dict, root: Path, dtype_name="f32"):
    entries = []
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if hasattr(arr, "data") else arr
        fname = blob_filename(name)
        write_blob(root / fname, np.asarray(arr, dtype=_DTYPE_NAMES[dtype_name]))
        entries.append({"name": name, "dtype": dtype_name, "shape": list(arr.shape),
                        "file": fname})
    return entries


def graph_doc(g: Graph, root: Path):
    return {
        "name": g.name,
        "input": {"shape": list(g.input_shape)},
        "nodes": [{"id": n.id, "kind": n.kind, "attrs": n.attrs, "inputs": list(n.inputs),
                   "params": n.params} for n in g.nodes],
        "params": params_doc(g.params, root),
        "output": g.output,
    }


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_model(g: Graph, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_json(graph_doc(g, path.parent)))
    except OSError as exc:
        raise GraphError("io", f"cannot write {path}: {exc}") from None
