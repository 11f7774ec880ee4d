"""Graph execution: float reference, fake quantization and true integer paths.

Every quantized path works on *grids*: each node output lives on the integer
grid of some QuantParams. Grid assignment (``grid_map``):

* graph input: its calibrated params;
* conv / fc: the params of the node itself, or of its relu when the relu is
  the sole consumer (conv+relu fusion);
* relu, maxpool, flatten: the input grid (they act on codes directly);
* avgpool, globalavgpool, add: their own calibrated params.

Requantization is the same function in every path: take the real value of the
result (``acc / (s_w s_x)`` for integer paths, the f64 sum for fake quant) and
``quantize_array`` it onto the destination grid. The fake path keeps its
dequantized values in float64 so that its sums agree with the integer
accumulators to well below half a code step.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bnfold import fold_bn
from .errors import EngineError, GraphError
from .graph import (INPUT_ID, Graph, dump_json, graph_doc, graph_from_doc, read_manifest,
                    shape_inference)
from .quantizer import (AFFINE, GRANULARITY_ALIASES, PER_CHANNEL, PER_TENSOR, SCALE,
                        SCHEME_ALIASES, QuantParams, calibrate_activations, compute_params,
                        dequantize_array, quantize_array, round_half_away)
from .squant import squant_codes
from .tensor import (TensorF, check_int32, conv_accumulate, linear_accumulate, read_blob,
                     write_blob)

FLOAT, FAKE, INT_SYM, INT_AFFINE = "float", "fake", "int", "int_affine"
PATHS = (FLOAT, FAKE, INT_SYM, INT_AFFINE)
PATH_ALIASES = {"float": FLOAT, "fake": FAKE, "fakequant": FAKE, "int": INT_SYM,
                "int_symmetric": INT_SYM, "int-affine": INT_AFFINE, "int_affine": INT_AFFINE,
                "affine": INT_AFFINE}


def _threads():
    try:
        return max(1, int(os.environ.get("ISQ_THREADS", "1")))
    except ValueError:
        return 1


def _map_batches(fn, x):
    """Apply ``fn`` to batch chunks, in order. Per-sample results do not depend on chunking."""
    t = min(_threads(), x.shape[0])
    if t <= 1:
        return fn(x)
    chunks = np.array_split(x, t)
    with ThreadPoolExecutor(t) as ex:
        parts = list(ex.map(fn, chunks))
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p) for p in zip(*parts))
    return np.concatenate(parts)


# --- shared array kernels ------------------------------------------------------

def _windows(x, k, stride):
    n, c, h, w = x.shape
    (kh, kw), (sh, sw) = k, stride
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    for i in range(kh):
        for j in range(kw):
            yield x[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]


def pool_max(x, k, stride):
    out = None
    for win in _windows(x, k, stride):
        out = win.copy() if out is None else np.maximum(out, win)
    return out


def pool_sum(x, k, stride, dtype):
    out = None
    for win in _windows(x, k, stride):
        out = win.astype(dtype) if out is None else out + win
    return out


def global_sum(x, dtype):
    h, w = x.shape[2:]
    return pool_sum(x, (h, w), (1, 1), dtype)


# --- float path ------------------------------------------------------------------

def _float_node(g, n, ins):
    x = ins[0]
    if n.kind == "conv2d":
        y = conv_accumulate(x, g.param(n, "weight"), n.stride, n.pad, np.float32)
        b = g.param(n, "bias")
        return y if b is None else y + b[None, :, None, None]
    if n.kind == "fc":
        y = linear_accumulate(x, g.param(n, "weight"), np.float32)
        b = g.param(n, "bias")
        return y if b is None else y + b[None, :]
    if n.kind == "batchnorm":
        shape = (1, -1) + (1,) * (x.ndim - 2)
        inv = (g.param(n, "gamma") / np.sqrt(g.param(n, "var") + np.float32(n.epsilon)))
        return ((x - g.param(n, "mean").reshape(shape)) * inv.reshape(shape)
                + g.param(n, "beta").reshape(shape)).astype(np.float32)
    if n.kind == "relu":
        return np.maximum(x, np.float32(0))
    if n.kind == "maxpool":
        return pool_max(x, n.kernel, n.stride)
    if n.kind == "avgpool":
        kh, kw = n.kernel
        return pool_sum(x, n.kernel, n.stride, np.float32) / np.float32(kh * kw)
    if n.kind == "globalavgpool":
        return global_sum(x, np.float32) / np.float32(x.shape[2] * x.shape[3])
    if n.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if n.kind == "add":
        return ins[0] + ins[1]
    raise EngineError("unsupported", f"float path cannot run {n.kind}")


def float_trace(g: Graph, x) -> dict:
    """Every node's f32 output (plus ``"input"``) for a raw input batch."""
    x = np.asarray(x, np.float32)
    shape_inference(g, x.shape)
    vals = {INPUT_ID: x}
    for n in g.nodes:
        vals[n.id] = _float_node(g, n, [vals[s] for s in n.inputs])
    return vals


def _as_array(input):
    return input.data if isinstance(input, TensorF) else np.asarray(input, np.float32)


def run_float(g: Graph, input) -> TensorF:
    x = _as_array(input)
    shape_inference(g, x.shape)
    y = _map_batches(lambda b: float_trace(g, b)[g.output], x)
    if not np.all(np.isfinite(y)):
        raise EngineError("non_finite", "float path produced a non-finite value")
    return TensorF(y)


# --- quantized graph -------------------------------------------------------------

@dataclass(eq=False)
class QuantizedGraph:
    graph: Graph                 # BN-folded float graph
    bits: int
    scheme: str
    granularity: str
    rounding: str
    weights: dict                # node id -> int64 codes
    weight_params: dict          # node id -> QuantParams
    bias: dict                   # node id -> int64 (int32-ranged) bias
    act: dict                    # node id -> QuantParams (incl. "input")
    calib: dict = field(default_factory=dict)   # node id -> CalibReport
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for n in self.graph.nodes:
            if n.kind == "batchnorm":
                raise EngineError("unfolded_bn", f"quantized graph still has BN {n.id!r}")
            if n.kind in ("conv2d", "fc") and (n.id not in self.weights
                                                or n.id not in self.weight_params):
                raise EngineError("missing_params", f"no quantized weight for {n.id!r}")
        self.grids = grid_map(self.graph, self.act)

    def __eq__(self, other):
        if not isinstance(other, QuantizedGraph):
            return NotImplemented
        same = lambda a, b: a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        return (self.graph == other.graph
                and (self.bits, self.scheme, self.granularity, self.rounding)
                == (other.bits, other.scheme, other.granularity, other.rounding)
                and same(self.weights, other.weights) and same(self.bias, other.bias)
                and self.weight_params == other.weight_params and self.act == other.act)

    __hash__ = None

    @property
    def symmetric(self):
        return (all(z == 0 for p in self.weight_params.values() for z in p.zero_point)
                and all(p.zero_point[0] == 0 for p in self.grids.values()))


def fused_relu(g: Graph, n):
    """The relu consuming conv/fc ``n`` alone, if any."""
    if n.kind not in ("conv2d", "fc") or g.output == n.id:
        return None
    cons = g.consumers(n.id)
    if len(cons) == 1 and cons[0].kind == "relu":
        return cons[0]
    return None


def grid_owners(g: Graph) -> dict:
    """Node id -> id whose activation params define that node's output grid."""
    owners = {INPUT_ID: INPUT_ID}
    for n in g.nodes:
        if n.kind in ("conv2d", "fc"):
            r = fused_relu(g, n)
            owners[n.id] = r.id if r else n.id
        elif n.kind in ("relu", "maxpool", "flatten"):
            owners[n.id] = owners[n.inputs[0]]
        else:
            owners[n.id] = n.id
    return owners


def grid_map(g: Graph, act: dict) -> dict:
    grids = {}
    for nid, owner in grid_owners(g).items():
        if owner not in act:
            raise EngineError("missing_params", f"no activation params for {owner!r}")
        grids[nid] = act[owner]
    return grids


def real_range(p: QuantParams):
    if p.scheme == SCALE:
        return (-p.alpha[0] if p.signed else 0.0), p.alpha[0]
    return p.beta[0], p.alpha[0]


def shared_grid(pa: QuantParams, pb: QuantParams) -> QuantParams:
    """Common grid for the two operands of an add: covers both real ranges."""
    lo = min(real_range(pa)[0], real_range(pb)[0])
    hi = max(real_range(pa)[1], real_range(pb)[1])
    return compute_params(np.array([lo, hi], np.float32), pa.bits, pa.scheme, PER_TENSOR,
                          pa.signed or pb.signed, allow_degenerate=True)


def quantize_graph(g: Graph, bits=8, scheme=SCALE, granularity=PER_TENSOR, rounding="squant",
                   fold_mode="strict", calib_batches=32, seed=0,
                   allow_degenerate=False) -> QuantizedGraph:
    """fold -> calibrate activations (random data) -> quantize weights -> int32 bias."""
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    granularity = GRANULARITY_ALIASES.get(granularity, granularity)
    if rounding not in ("nearest", "squant"):
        raise EngineError("bad_rounding", f"rounding must be nearest or squant, got {rounding!r}")
    folded = fold_bn(g, fold_mode)
    if any(n.kind == "batchnorm" for n in folded.nodes):
        raise EngineError("unfolded_bn", "cannot quantize a graph with unfused BN")
    act = calibrate_activations(folded, calib_batches, seed, bits, scheme,
                                allow_degenerate=allow_degenerate)
    grids = grid_map(folded, act)
    weights, wparams, bias, calib = {}, {}, {}, {}
    for n in folded.layers():
        w = folded.param(n, "weight")
        p = compute_params(w, bits, scheme, granularity, True, allow_degenerate)
        if rounding == "squant":
            q, report = squant_codes(w, p)
            calib[n.id] = report
        else:
            q = quantize_array(w, p)
        weights[n.id], wparams[n.id] = q, p
        b = folded.param(n, "bias")
        sx = grids[n.inputs[0]].s
        bias[n.id] = bias_to_int(b, p, sx, w.shape[0])
    return QuantizedGraph(folded, bits, scheme, granularity, rounding, weights, wparams, bias,
                          act, calib, {"calib_batches": calib_batches, "seed": seed})


def bias_to_int(b, pw: QuantParams, sx, out_ch):
    """round(b * s_w * s_x) as int32-ranged int64; zeros when there is no bias."""
    if b is None:
        return np.zeros(out_ch, np.int64)
    sw = np.asarray(pw.scale, np.float64)
    q = round_half_away(np.asarray(b, np.float64) * (sw * sx)).astype(np.int64)
    check_int32(q, "bias")
    return q


def _acc_scale(pw: QuantParams, px: QuantParams, ndim):
    """1 / (s_w s_x), broadcast along the output-channel axis."""
    sw = np.asarray(pw.scale, np.float64)
    c = 1.0 / (sw * px.s)
    return c.reshape((1, -1) + (1,) * (ndim - 2))


# --- fake quant path -----------------------------------------------------------

def _fake_trace(qg: QuantizedGraph, x):
    g, grids = qg.graph, qg.grids
    vals = {INPUT_ID: dequantize_array(quantize_array(x, grids[INPUT_ID]), grids[INPUT_ID])}
    codes = {}
    out = None
    for n in g.nodes:
        ins = [vals[s] for s in n.inputs]
        xin = ins[0]
        if n.kind in ("conv2d", "fc"):
            pw, px = qg.weight_params[n.id], grids[n.inputs[0]]
            w_hat = dequantize_array(qg.weights[n.id], pw)
            if n.kind == "conv2d":
                y = conv_accumulate(xin, w_hat, n.stride, n.pad, np.float64)
            else:
                y = linear_accumulate(xin, w_hat, np.float64)
            c = _acc_scale(pw, px, y.ndim)
            b_hat = qg.bias[n.id].astype(np.float64).reshape((1, -1) + (1,) * (y.ndim - 2)) * c
            y = y + b_hat
            if n.id == g.output:
                out = y
                vals[n.id] = y
                continue
        elif n.kind == "relu":
            y = np.maximum(xin, 0.0)
        elif n.kind == "maxpool":
            y = pool_max(xin, n.kernel, n.stride)
        elif n.kind == "flatten":
            y = xin.reshape(xin.shape[0], -1)
        elif n.kind == "avgpool":
            kh, kw = n.kernel
            y = pool_sum(xin, n.kernel, n.stride, np.float64) / (kh * kw)
        elif n.kind == "globalavgpool":
            y = global_sum(xin, np.float64) / (xin.shape[2] * xin.shape[3])
        elif n.kind == "add":
            sg = shared_grid(grids[n.inputs[0]], grids[n.inputs[1]])
            a, b = (dequantize_array(quantize_array(v, sg), sg) for v in ins)
            y = a + b
        else:
            raise EngineError("unsupported", f"fake-quant path cannot run {n.kind}")
        grid = grids[n.id]
        codes[n.id] = quantize_array(y, grid)
        vals[n.id] = dequantize_array(codes[n.id], grid)
    if out is None:
        out = vals[g.output]
    return out, codes


def run_fake_quant(qg: QuantizedGraph, input, trace=False):
    x = _as_array(input)
    shape_inference(qg.graph, x.shape)
    if trace:
        out, codes = _fake_trace(qg, x)
        return TensorF(out.astype(np.float32)), codes
    return TensorF(_map_batches(lambda b: _fake_trace(qg, b)[0].astype(np.float32), x))


# --- integer paths ---------------------------------------------------------------

@dataclass
class AffineTerms:
    """Cross terms of an affine integer conv: y = s_x s_w (p0 - p1 - p2 + p3)."""

    p0: np.ndarray   # sum x_q w_q                 (N, O, ...)
    p1: np.ndarray   # z_w * sum x_q (window sums)  (N, O, ...)
    p2: np.ndarray   # z_x * sum w_q per channel    broadcastable (1, O, ...)
    p3: np.ndarray   # n * z_x * z_w                broadcastable (1, O, ...)

    def combine(self):
        acc = self.p0 - self.p1 - self.p2 + self.p3
        check_int32(acc, "affine accumulator")
        return acc


def affine_terms(xq, wq, zx, zw, kind="conv2d", stride=(1, 1), pad=(0, 0)) -> AffineTerms:
    """Compute p0..p3 separately in integer arithmetic. Conv padding uses ``zx``.

    ``zw`` may be a scalar or one zero-point per output channel.
    """
    xq = np.asarray(xq, np.int64)
    wq = np.asarray(wq, np.int64)
    zw = np.asarray(zw, np.int64).reshape(-1)
    if kind == "conv2d":
        p0 = conv_accumulate(xq, wq, stride, pad, np.int64, pad_value=zx)
        ones = np.ones((1,) + wq.shape[1:], np.int64)
        wsum_x = conv_accumulate(xq, ones, stride, pad, np.int64, pad_value=zx)
        shape = (1, -1, 1, 1)
    else:
        p0 = linear_accumulate(xq, wq, np.int64)
        wsum_x = xq.sum(axis=1, keepdims=True)
        shape = (1, -1)
    zw_b = zw.reshape(shape)
    n = int(np.prod(wq.shape[1:]))
    p1 = zw_b * wsum_x
    p2 = (zx * wq.reshape(wq.shape[0], -1).sum(axis=1)).reshape(shape)
    p3 = (n * zx * zw).reshape(shape)
    for name, t in (("p0", p0), ("p1", p1), ("p2", p2), ("p3", p3)):
        check_int32(t, f"affine term {name}")
    p1 = np.broadcast_to(p1, p0.shape) if p1.shape != p0.shape else p1
    return AffineTerms(p0, p1, p2, p3)


def _int_trace(qg: QuantizedGraph, x, affine: bool):
    g, grids = qg.graph, qg.grids
    if not affine and not qg.symmetric:
        raise EngineError("nonzero_zero_point",
                          "zero-point-free integer path requires z = 0 everywhere")
    codes = {INPUT_ID: quantize_array(x, grids[INPUT_ID])}
    terms = {}
    out = None
    for n in g.nodes:
        ins = [codes[s] for s in n.inputs]
        q = ins[0]
        grid = grids[n.id]
        if n.kind in ("conv2d", "fc"):
            pw, px = qg.weight_params[n.id], grids[n.inputs[0]]
            wq = qg.weights[n.id]
            if affine:
                t = affine_terms(q, wq, px.z, pw.zero_point, n.kind, n.stride, n.pad)
                terms[n.id] = t
                acc = t.combine()
            elif n.kind == "conv2d":
                acc = conv_accumulate(q, wq, n.stride, n.pad, np.int64)
            else:
                acc = linear_accumulate(q, wq, np.int64)
            check_int32(acc, f"{n.id} accumulator")
            acc = acc + qg.bias[n.id].reshape((1, -1) + (1,) * (acc.ndim - 2))
            check_int32(acc, f"{n.id} accumulator + bias")
            y = acc.astype(np.float64) * _acc_scale(pw, px, acc.ndim)
            if n.id == g.output:
                out = y
                codes[n.id] = acc
                continue
            codes[n.id] = quantize_array(y, grid)
        elif n.kind == "relu":
            codes[n.id] = np.maximum(q, grid.z)
        elif n.kind == "maxpool":
            codes[n.id] = pool_max(q, n.kernel, n.stride)
        elif n.kind == "flatten":
            codes[n.id] = q.reshape(q.shape[0], -1)
        elif n.kind in ("avgpool", "globalavgpool"):
            pin = grids[n.inputs[0]]
            if n.kind == "avgpool":
                cnt = n.kernel[0] * n.kernel[1]
                acc = pool_sum(q - pin.z, n.kernel, n.stride, np.int64)
            else:
                cnt = q.shape[2] * q.shape[3]
                acc = global_sum(q - pin.z, np.int64)
            check_int32(acc, f"{n.id} pool accumulator")
            codes[n.id] = quantize_array(acc.astype(np.float64) / pin.s / cnt, grid)
        elif n.kind == "add":
            pa, pb = grids[n.inputs[0]], grids[n.inputs[1]]
            sg = shared_grid(pa, pb)
            qa = quantize_array(dequantize_array(ins[0], pa), sg)
            qb = quantize_array(dequantize_array(ins[1], pb), sg)
            acc = (qa - sg.z) + (qb - sg.z)
            check_int32(acc, f"{n.id} add accumulator")
            codes[n.id] = quantize_array(acc.astype(np.float64) / sg.s, grid)
        else:
            raise EngineError("unsupported", f"integer path cannot run {n.kind}")
    if out is None:
        out = dequantize_array(codes[g.output], grids[g.output])
    return out, codes, terms


def run_int_symmetric(qg: QuantizedGraph, input, trace=False):
    x = _as_array(input)
    shape_inference(qg.graph, x.shape)
    if trace:
        out, codes, _ = _int_trace(qg, x, affine=False)
        return TensorF(out.astype(np.float32)), codes
    return TensorF(_map_batches(lambda b: _int_trace(qg, b, False)[0].astype(np.float32), x))


def run_int_affine(qg: QuantizedGraph, input):
    """Returns (output, {node id: AffineTerms})."""
    x = _as_array(input)
    shape_inference(qg.graph, x.shape)
    out, _, terms = _int_trace(qg, x, affine=True)
    return TensorF(out.astype(np.float32)), terms


def int_codes(qg: QuantizedGraph, input) -> dict:
    """Per-node integer codes (accumulator for an output conv/fc) from the integer path."""
    x = _as_array(input)
    shape_inference(qg.graph, x.shape)
    return _int_trace(qg, x, affine=not qg.symmetric)[1]


def run_path(path, model, input):
    """Dispatch by path name; ``model`` is a Graph for float, a QuantizedGraph otherwise."""
    path = PATH_ALIASES.get(path, path)
    if path == FLOAT:
        return run_float(model.graph if isinstance(model, QuantizedGraph) else model, input)
    if not isinstance(model, QuantizedGraph):
        raise EngineError("not_quantized", f"path {path!r} needs a quantized graph")
    if path == FAKE:
        return run_fake_quant(model, input)
    if path == INT_SYM:
        return run_int_symmetric(model, input)
    if path == INT_AFFINE:
        return run_int_affine(model, input)[0]
    raise EngineError("bad_path", f"unknown path {path!r}")


# --- op counting -----------------------------------------------------------------

@dataclass
class OpCount:
    path: str
    mults: int = 0
    adds: int = 0
    weight_scales: int = 0
    weight_zero_points: int = 0
    act_scales: int = 0
    act_zero_points: int = 0
    per_layer: dict = field(default_factory=dict)

    @property
    def params(self):
        return (self.weight_scales + self.weight_zero_points + self.act_scales
                + self.act_zero_points)

    def to_dict(self):
        return {"path": self.path, "mults": self.mults, "adds": self.adds,
                "weight_scales": self.weight_scales,
                "weight_zero_points": self.weight_zero_points,
                "act_scales": self.act_scales, "act_zero_points": self.act_zero_points,
                "params": self.params, "per_layer": self.per_layer}


def count_ops(qg, path=INT_SYM) -> OpCount:
    """Multiply/add counts for one sample and quantization parameter counts.

    Conv/fc MACs count one mult and one add each, plus one add per output for
    the bias. The affine path adds: window sums of x (shared across output
    channels), one mult per output for z_w * sum x, the precomputed per-channel
    z_x * sum w (adds over the weight, one mult per channel), the constant
    n z_x z_w (one mult per channel) and three adds per output to combine.
    Symmetric params store scales only; affine also stores one zero-point per scale.
    """
    path = PATH_ALIASES.get(path, path)
    g = qg.graph if isinstance(qg, QuantizedGraph) else qg
    shapes = shape_inference(g, (1,) + tuple(g.input_shape[1:]))
    oc = OpCount(path)
    quantized = isinstance(qg, QuantizedGraph) and path != FLOAT
    for n in g.layers():
        w = g.param(n, "weight")
        out = shapes[n.id]
        outputs = int(np.prod(out[1:]))
        taps = int(np.prod(w.shape[1:]))
        mults = outputs * taps
        adds = outputs * taps + outputs
        if path == INT_AFFINE:
            spatial = outputs // w.shape[0]
            adds += spatial * taps + w.size + 3 * outputs
            mults += outputs + 2 * w.shape[0]
        oc.mults += mults
        oc.adds += adds
        layer = {"mults": mults, "adds": adds}
        if quantized:
            ns = qg.weight_params[n.id].channels
            oc.weight_scales += ns
            layer["weight_scales"] = ns
            if path == INT_AFFINE or qg.scheme == AFFINE:
                oc.weight_zero_points += ns
        oc.per_layer[n.id] = layer
    if quantized:
        distinct = set(grid_owners(g).values())
        oc.act_scales = len(distinct)
        if path == INT_AFFINE or qg.scheme == AFFINE:
            oc.act_zero_points = len(distinct)
    return oc


# --- quantized-model manifest ----------------------------------------------------

def save_quantized(qg: QuantizedGraph, path) -> None:
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    doc = graph_doc(qg.graph, root)
    weights, bias = {}, {}
    for nid in sorted(qg.weights):
        q = qg.weights[nid]
        dt, dname = (np.int8, "i8") if q.min() >= -128 and q.max() <= 127 else (np.int32, "i32")
        fname = f"{nid}.wq.bin"
        write_blob(root / fname, q.astype(dt))
        weights[nid] = {"params": qg.weight_params[nid].to_dict(), "file": fname,
                        "dtype": dname, "shape": list(q.shape)}
        bname = f"{nid}.bq.bin"
        write_blob(root / bname, qg.bias[nid].astype(np.int32))
        bias[nid] = {"file": bname, "dtype": "i32", "shape": list(qg.bias[nid].shape)}
    doc["quant"] = {
        "bits": qg.bits, "scheme": qg.scheme, "granularity": qg.granularity,
        "rounding": qg.rounding, "weights": weights, "bias": bias,
        "activations": {k: qg.act[k].to_dict() for k in sorted(qg.act)},
        "meta": qg.meta,
    }
    path.write_text(dump_json(doc))


def is_quantized_manifest(path) -> bool:
    return "quant" in read_manifest(path)


def load_quantized(path) -> QuantizedGraph:
    path = Path(path)
    doc = read_manifest(path)
    if "quant" not in doc:
        raise GraphError("not_quantized", f"{path} is not a quantized-model manifest")
    g = graph_from_doc(doc, path.parent)
    qd = doc["quant"]
    try:
        weights, wparams, bias = {}, {}, {}
        for nid, e in qd["weights"].items():
            weights[nid] = _read_int_blob(path.parent, e).astype(np.int64)
            wparams[nid] = QuantParams.from_dict(e["params"])
        for nid, e in qd["bias"].items():
            bias[nid] = _read_int_blob(path.parent, e).astype(np.int64)
        act = {k: QuantParams.from_dict(v) for k, v in qd["activations"].items()}
        return QuantizedGraph(g, int(qd["bits"]), qd["scheme"], qd["granularity"],
                              qd["rounding"], weights, wparams, bias, act,
                              meta=qd.get("meta", {}))
    except (KeyError, TypeError, AttributeError) as exc:
        raise GraphError("schema", f"{path}: malformed quant section: {exc}") from None


def _read_int_blob(root, entry):
    f = root / entry["file"]
    if not f.is_file():
        raise GraphError("missing_blob", f"blob file {entry['file']!r} not found")
    arr = read_blob(f)
    if list(arr.shape) != list(entry["shape"]):
        raise GraphError("shape_mismatch", f"{entry['file']}: shape {arr.shape} != {entry['shape']}")
    return arr


def write_trace(path, trace: dict, qg: QuantizedGraph | None = None) -> None:
    """Line-delimited per-node records: id, kind, min, max (and weight ASE when known)."""
    import json

    kinds = {INPUT_ID: "input"}
    if qg is not None:
        kinds.update({n.id: n.kind for n in qg.graph.nodes})
    lines = []
    for nid, arr in trace.items():
        rec = {"id": nid, "kind": kinds.get(nid, "?"), "min": float(np.min(arr)),
               "max": float(np.max(arr))}
        if qg is not None and nid in qg.calib:
            rec["max_kernel_ase"] = float(qg.calib[nid].kernel_ase_after.max())
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")
