"""``isq``: fold -> calibrate -> quantize -> execute -> report.

Exit codes: 0 success, 1 internal error, 2 usage/input error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import engine, metrics, zoo
from .errors import IsqError
from .graph import load_model

# Default configuration: symmetric, per-tensor, 8-bit, flip rounding, strict BN fold.
PRESET = {"bits": 8, "scheme": "symmetric", "granularity": "per-tensor",
          "rounding": "squant", "fold_bn": "strict"}


class UsageError(IsqError):
    module = "cli"

    def __init__(self, message):
        super().__init__("usage", message)


def resolve_model(arg) -> Path:
    p = Path(arg)
    if p.is_file():
        return p
    if arg in ("tinycnn", "tinycnn.json"):
        return zoo.tinycnn_path()
    raise UsageError(f"model not found: {arg}")


def _bits_list(text):
    try:
        return [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"bad --bits list: {text!r}") from None


def _add_quant_flags(p):
    p.add_argument("--bits", default=str(PRESET["bits"]),
                   help="bit width (compare: comma list)")
    p.add_argument("--scheme", choices=["symmetric", "asymmetric"], default=PRESET["scheme"])
    p.add_argument("--granularity", choices=["per-tensor", "per-channel"],
                   default=PRESET["granularity"])
    p.add_argument("--rounding", choices=["nearest", "squant"], default=PRESET["rounding"])
    p.add_argument("--fold-bn", choices=["strict", "permissive"], default=PRESET["fold_bn"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calib-batches", type=int, default=32)
    p.add_argument("--allow-degenerate", action="store_true",
                   help="use s=1, z=0 for all-zero number sets instead of failing")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock timings (makes reports non-reproducible)")


def build_parser():
    ap = argparse.ArgumentParser(prog="isq", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a model (data-free)")
    q.add_argument("model")
    q.add_argument("-o", "--output", required=True, help="output directory")
    _add_quant_flags(q)

    e = sub.add_parser("eval", help="evaluate float / fake-quant / integer paths")
    e.add_argument("model")
    e.add_argument("--dataset", help="directory with inputs.bin and labels.bin "
                   "(default: the bundled tinycnn eval set)")
    e.add_argument("--paths", help="comma list of float,fake,int,int_affine")
    e.add_argument("--trace", help="write a per-node layer trace (JSON lines)")
    _add_quant_flags(e)

    c = sub.add_parser("compare", help="nearest vs squant rounding across bit widths")
    c.add_argument("model")
    c.add_argument("--dataset")
    _add_quant_flags(c)

    i = sub.add_parser("info", help="layer, parameter and op counts")
    i.add_argument("model")
    i.add_argument("--json", action="store_true")
    return ap


def _quant_kwargs(args, bits=None):
    return {"bits": bits if bits is not None else _single_bits(args.bits),
            "scheme": args.scheme, "granularity": args.granularity,
            "rounding": args.rounding, "fold_mode": args.fold_bn,
            "calib_batches": args.calib_batches, "seed": args.seed,
            "allow_degenerate": args.allow_degenerate}


def _single_bits(text):
    bits = _bits_list(text)
    if len(bits) != 1 or not 2 <= bits[0] <= 8:
        raise UsageError(f"--bits must be one integer in [2, 8], got {text!r}")
    return bits[0]


def _dataset(args, graph):
    if args.dataset:
        return zoo.load_dataset(args.dataset)
    x, y = zoo.eval_set()
    if tuple(x.shape[1:]) != tuple(graph.input_shape[1:]):
        raise UsageError("no --dataset given and the bundled eval set does not fit this model")
    return x, y


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_quantize(args, out=None):
    out = out or sys.stdout
    model = resolve_model(args.model)
    graph = load_model(model)
    qg = engine.quantize_graph(graph, **_quant_kwargs(args))
    outdir = Path(args.output)
    engine.save_quantized(qg, outdir / "model.json")
    report = {
        "model": graph.name, "bits": qg.bits, "scheme": qg.scheme,
        "granularity": qg.granularity, "rounding": qg.rounding,
        "calib_batches": args.calib_batches, "seed": args.seed,
        "layers": {k: v.to_dict(args.timing) for k, v in sorted(qg.calib.items())},
        "activations": {k: qg.act[k].to_dict() for k in sorted(qg.act)},
    }
    if args.timing:
        report["calibration_ms"] = sum(v.elapsed_ms for v in qg.calib.values())
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _write(args.report or outdir / "calib_report.json", text)
    print(f"quantized {graph.name}: bits={qg.bits} scheme={qg.scheme} "
          f"granularity={qg.granularity} rounding={qg.rounding} -> {outdir / 'model.json'}",
          file=out)
    for nid, rep in sorted(qg.calib.items()):
        s = rep.summary()
        print(f"  {nid}: kernel ASE {s['max_kernel_ase_before']:.3f} -> "
              f"{s['max_kernel_ase_after']:.3f}, flips {s['total_flips']}", file=out)
    return qg


def _load_for_eval(args):
    path = resolve_model(args.model)
    paths = args.paths.split(",") if args.paths else None
    if engine.is_quantized_manifest(path):
        return engine.load_quantized(path), paths
    graph = load_model(path)
    wanted = [engine.PATH_ALIASES.get(p, p) for p in (paths or [engine.FLOAT])]
    if any(p != engine.FLOAT for p in wanted):
        return engine.quantize_graph(graph, **_quant_kwargs(args)), wanted
    return graph, wanted


def cmd_eval(args, out=None):
    out = out or sys.stdout
    model, paths = _load_for_eval(args)
    graph = model.graph if isinstance(model, engine.QuantizedGraph) else model
    report = metrics.evaluate(model, _dataset(args, graph), paths, timing=args.timing)
    out.write(report.table())
    if report.parity:
        print(f"parity fake vs int: bit_exact={report.parity['bit_exact']} "
              f"max_abs_diff={report.parity['max_abs_diff']}", file=out)
    _write(args.report or "eval_report.json", report.to_json())
    if args.trace and isinstance(model, engine.QuantizedGraph):
        x, _ = _dataset(args, graph)
        engine.write_trace(args.trace, engine.int_codes(model, x[:1]), model)
    return report


def cmd_compare(args, out=None):
    out = out or sys.stdout
    graph = load_model(resolve_model(args.model))
    bits = _bits_list(args.bits)
    rows = metrics.compare_roundings(graph, bits, _dataset(args, graph), seed=args.seed,
                                     calib_batches=args.calib_batches, scheme=args.scheme,
                                     granularity=args.granularity, fold_mode=args.fold_bn)
    out.write(metrics.compare_table(rows))
    if args.report:
        _write(args.report, json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return rows


def cmd_info(args, out=None):
    out = out or sys.stdout
    path = resolve_model(args.model)
    graph = (engine.load_quantized(path).graph if engine.is_quantized_manifest(path)
             else load_model(path))
    info = metrics.model_info(graph)
    if args.json:
        out.write(json.dumps(info, indent=2, sort_keys=True) + "\n")
        return info
    print(f"model: {info['name']}", file=out)
    print(f"layers (conv/fc): {info['layers']}", file=out)
    print(f"nodes: {info['nodes']}", file=out)
    print(f"float parameters: {info['float_params']}", file=out)
    for p, c in info["ops"].items():
        print(f"ops[{p}]: mults={c['mults']} adds={c['adds']}", file=out)
    qp = info["quant_params"]
    for key, c in qp.items():
        print(f"quant params[{key}]: {c['total']} (weight scales {c['weight_scales']}, "
              f"activation scales {c['act_scales']})", file=out)
    delta = (qp["symmetric/per_channel"]["total"] - qp["symmetric/per_tensor"]["total"])
    print(f"per-channel minus per-tensor (symmetric): {delta}", file=out)
    return info


COMMANDS = {"quantize": cmd_quantize, "eval": cmd_eval, "compare": cmd_compare,
            "info": cmd_info}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except IsqError as exc:
        print(f"isq: error[{exc.qualified_code}]: {exc.message}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"isq: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
