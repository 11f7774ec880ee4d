"""Accuracy, error norms, rounding comparisons and calibration timing."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bnfold import fold_bn
from .engine import (FAKE, FLOAT, INT_AFFINE, INT_SYM, PATH_ALIASES, QuantizedGraph,
                     count_ops, grid_owners, quantize_graph, run_path)
from .errors import EvalError
from .graph import Graph
from .quantizer import PER_CHANNEL, PER_TENSOR, SCALE, compute_params
from .squant import squant_codes

TIMING_REPEATS = 5


def accuracy(outputs, labels) -> float:
    """Top-1 accuracy in percent."""
    outputs = np.asarray(outputs)
    labels = np.asarray(labels)
    if outputs.ndim != 2:
        raise EvalError("arity", f"expected (N, classes) outputs, got shape {outputs.shape}")
    if len(labels) != len(outputs):
        raise EvalError("arity", f"{len(labels)} labels for {len(outputs)} predictions")
    if labels.size and (labels.min() < 0 or labels.max() >= outputs.shape[1]):
        raise EvalError("arity", f"labels outside [0, {outputs.shape[1]})")
    return 100.0 * float(np.mean(outputs.argmax(axis=1) == labels))


def error_norms(a, b) -> dict:
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return {"linf": float(np.abs(d).max()), "l2": float(np.sqrt(np.sum(d * d))),
            "mean_abs": float(np.abs(d).mean())}


@dataclass
class EvalReport:
    model: str
    bits: int | None
    scheme: str | None
    granularity: str | None
    rounding: str | None
    samples: int
    accuracy: dict                     # path -> percent
    delta: dict                        # path -> float accuracy - path accuracy
    errors: dict                       # "a_vs_b" -> norms
    parity: dict = field(default_factory=dict)
    calib: dict = field(default_factory=dict)
    ops: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    timing: dict | None = None

    def to_dict(self):
        d = asdict(self)
        if d["timing"] is None:
            del d["timing"]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(**{"timing": None, **d})

    def table(self):
        rows = []
        base = self.accuracy.get(FLOAT)
        for path, acc in self.accuracy.items():
            if path == FLOAT:
                continue
            rows.append({"model": self.model, "bits": self.bits, "path": path,
                         "baseline": base, "quantized": acc, "delta": self.delta.get(path)})
        if not rows:
            rows.append({"model": self.model, "bits": "-", "path": FLOAT, "baseline": base,
                         "quantized": "-", "delta": "-"})
        return format_table(rows, ["model", "bits", "path", "baseline", "quantized", "delta"])


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def format_table(rows, columns) -> str:
    """Aligned-column text table."""
    cells = [[c for c in columns]] + [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _check_dataset(model, x, y):
    x = np.asarray(x, np.float32)
    if x.ndim == 0 or len(x) == 0:
        raise EvalError("empty_dataset", "dataset has no samples")
    g = model.graph if isinstance(model, QuantizedGraph) else model
    if tuple(x.shape[1:]) != tuple(g.input_shape[1:]):
        raise EvalError("shape_mismatch", f"dataset inputs {x.shape[1:]} do not match model "
                        f"input {g.input_shape[1:]}")
    if y is not None and len(y) != len(x):
        raise EvalError("arity", f"{len(y)} labels for {len(x)} inputs")
    return x


def evaluate(model, dataset, paths=None, timing=False) -> EvalReport:
    """Run each path over the dataset; accuracy, deltas vs float, pairwise error norms.

    ``model`` is a QuantizedGraph (default paths float, fake, int) or a plain
    Graph (float only). ``dataset`` is ``(inputs, labels)``; labels may be None.
    """
    x, y = dataset
    x = _check_dataset(model, x, y)
    quantized = isinstance(model, QuantizedGraph)
    if paths is None:
        paths = (FLOAT, FAKE, INT_SYM) if quantized else (FLOAT,)
    paths = [PATH_ALIASES.get(p, p) for p in paths]
    for p in paths:
        if p not in (FLOAT, FAKE, INT_SYM, INT_AFFINE):
            raise EvalError("bad_path", f"unknown path {p!r}")
        if p != FLOAT and not quantized:
            raise EvalError("not_quantized", f"path {p!r} needs a quantized model")
    outs, times = {}, {}
    for p in paths:
        t0 = time.perf_counter()
        outs[p] = run_path(p, model, x).data
        times[p] = (time.perf_counter() - t0) * 1e3
    acc, delta = {}, {}
    if y is not None:
        acc = {p: accuracy(outs[p], y) for p in paths}
        if FLOAT in acc:
            delta = {p: acc[FLOAT] - acc[p] for p in paths}
    errors = {}
    for i, a in enumerate(paths):
        for b in paths[i + 1:]:
            errors[f"{a}_vs_{b}"] = error_norms(outs[a], outs[b])
    parity = {}
    if FAKE in outs and INT_SYM in outs:
        parity = {"bit_exact": bool(np.array_equal(outs[FAKE], outs[INT_SYM])),
                  "same_predictions": bool(np.array_equal(outs[FAKE].argmax(1),
                                                          outs[INT_SYM].argmax(1)))
                  if outs[FAKE].ndim == 2 else None,
                  "max_abs_diff": float(np.abs(outs[FAKE] - outs[INT_SYM]).max())}
    g = model.graph if quantized else model
    report = EvalReport(
        model=g.name,
        bits=model.bits if quantized else None,
        scheme=model.scheme if quantized else None,
        granularity=model.granularity if quantized else None,
        rounding=model.rounding if quantized else None,
        samples=int(len(x)), accuracy=acc, delta=delta, errors=errors, parity=parity,
        calib={k: v.summary() for k, v in sorted(model.calib.items())} if quantized else {},
        ops={p: count_ops(model, p).to_dict() for p in paths},
        config=dict(model.meta) if quantized else {},
        timing={"eval_ms": times} if timing else None)
    return report


# --- rounding comparison ---------------------------------------------------------

def compare_roundings(graph: Graph, bits_list, dataset, roundings=("nearest", "squant"),
                      seed=0, calib_batches=32, scheme=SCALE, granularity=PER_TENSOR,
                      fold_mode="strict"):
    """One row per (bits, rounding): accuracy, delta, ASE stats, median output error."""
    bits_list = list(bits_list)
    if not bits_list or any(not 4 <= int(b) <= 8 for b in bits_list):
        raise EvalError("bad_bits", f"bits must lie in [4, 8], got {bits_list}")
    x, y = dataset
    x = _check_dataset(graph, x, y)
    folded = fold_bn(graph, fold_mode)
    ref = run_path(FLOAT, folded, x).data
    base = accuracy(ref, y) if y is not None else None
    rows = []
    for b in bits_list:
        for r in roundings:
            qg = quantize_graph(folded, int(b), scheme, granularity, r, fold_mode,
                                calib_batches, seed)
            out = run_path(INT_SYM if qg.symmetric else INT_AFFINE, qg, x).data
            per_sample = np.abs(out.astype(np.float64) - ref).reshape(len(x), -1).max(axis=1)
            if r == "squant":
                ase = [float(rep.kernel_ase_after.max()) for rep in qg.calib.values()]
            else:
                ase = [_nearest_max_ase(folded, qg, n.id) for n in folded.layers()]
            q_acc = accuracy(out, y) if y is not None else None
            rows.append({
                "model": graph.name, "bits": int(b), "rounding": r, "baseline": base,
                "quantized": q_acc,
                "delta": None if base is None else base - q_acc,
                "max_kernel_ase": max(ase) if ase else 0.0,
                "median_err": float(np.median(per_sample)),
            })
    return rows


def _nearest_max_ase(g, qg, nid):
    w = g.param(g.node(nid), "weight").astype(np.float64)
    p = qg.weight_params[nid]
    v = w * p.scale_array(w.ndim)
    e = v - (qg.weights[nid] - p.zp_array(w.ndim))
    e = e.reshape(e.shape[0], e.shape[1], -1) if e.ndim == 4 else e.reshape(e.shape[0], 1, -1)
    return float(np.abs(e.sum(-1)).max())


COMPARE_COLUMNS = ["model", "bits", "rounding", "baseline", "quantized", "delta",
                   "max_kernel_ase", "median_err"]


def compare_table(rows) -> str:
    return format_table(rows, COMPARE_COLUMNS)


# --- timing ----------------------------------------------------------------------

def time_calibration(graph: Graph, bits=8, scheme=SCALE, granularity=PER_TENSOR,
                     repeats=TIMING_REPEATS) -> dict:
    """Wall-clock of flip rounding over every conv/fc layer (median of ``repeats``)."""
    if any(n.kind == "batchnorm" for n in graph.nodes):
        raise EvalError("unfolded_bn", "time_calibration expects a BN-folded graph")
    per_layer = {}
    for n in graph.layers():
        w = graph.param(n, "weight")
        p = compute_params(w, bits, scheme, granularity, True, allow_degenerate=True)
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            squant_codes(w, p)
            runs.append((time.perf_counter() - t0) * 1e3)
        per_layer[n.id] = float(np.median(runs))
    return {"per_layer": per_layer, "total_ms": float(sum(per_layer.values())),
            "layers": len(per_layer)}


# --- structural summaries --------------------------------------------------------

def param_counts(graph: Graph) -> dict:
    """Quantization parameter counts per (scheme, granularity) for a (folded) graph."""
    layers = graph.layers()
    acts = len(set(grid_owners(graph).values()))
    out = {}
    for scheme in ("symmetric", "asymmetric"):
        for gran in (PER_TENSOR, PER_CHANNEL):
            ws = sum(1 if gran == PER_TENSOR else graph.param(n, "weight").shape[0]
                     for n in layers)
            zp = scheme == "asymmetric"
            out[f"{scheme}/{gran}"] = {"weight_scales": ws, "weight_zero_points": ws if zp else 0,
                                       "act_scales": acts, "act_zero_points": acts if zp else 0,
                                       "total": (ws + acts) * (2 if zp else 1)}
    return out


def model_info(graph: Graph) -> dict:
    folded = fold_bn(graph, "permissive")
    float_params = int(sum(p.data.size for p in graph.params.values()))
    return {
        "name": graph.name,
        "layers": len(folded.layers()),
        "nodes": len(graph.nodes),
        "float_params": float_params,
        "ops": {p: {k: v for k, v in count_ops(folded, p).to_dict().items()
                    if k in ("mults", "adds")} for p in (FLOAT, INT_SYM, INT_AFFINE)},
        "quant_params": param_counts(folded),
    }
