"""Fold BatchNorm into the preceding conv/fc (naive fold, inference only)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import FoldError
from .graph import Graph, Node, make_graph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    eps: float

    def __post_init__(self):
        n = len(self.gamma)
        if not (len(self.beta) == len(self.mu) == len(self.var) == n):
            raise FoldError("bad_bn", "BN vectors differ in length")
        if np.any(np.asarray(self.var) < 0):
            raise FoldError("bad_bn", "BN variance must be >= 0")
        if not self.eps > 0:
            raise FoldError("bad_bn", "BN epsilon must be > 0")

    @classmethod
    def of(cls, g: Graph, bn: Node):
        return cls(g.param(bn, "gamma"), g.param(bn, "beta"), g.param(bn, "mean"),
                   g.param(bn, "var"), bn.epsilon)

    def factor(self):
        return (np.asarray(self.gamma, np.float64)
                / np.sqrt(np.asarray(self.var, np.float64) + self.eps))


def fold_weights(w, b, bn: BnParams):
    """Return (w_fold, b_fold) as f32. ``b`` may be None (treated as zeros)."""
    f = bn.factor()
    w64 = np.asarray(w, np.float64)
    b64 = np.zeros(w64.shape[0]) if b is None else np.asarray(b, np.float64)
    w_fold = w64 * f.reshape((-1,) + (1,) * (w64.ndim - 1))
    b_fold = np.asarray(bn.beta, np.float64) + (b64 - np.asarray(bn.mu, np.float64)) * f
    return w_fold.astype(np.float32), b_fold.astype(np.float32)


def fold_bn(g: Graph, mode: str = "strict") -> Graph:
    """Return a new graph with every foldable (conv|fc, bn) pair merged.

    In ``strict`` mode an unfoldable BN raises FoldError; in ``permissive``
    mode it is left in place with a warning.
    """
    if mode not in ("strict", "permissive"):
        raise FoldError("bad_mode", f"fold mode must be strict or permissive, got {mode!r}")
    params = dict(g.params)
    nodes = {n.id: n for n in g.nodes}
    order = [n.id for n in g.nodes]
    output = g.output
    for bn in [n for n in g.nodes if n.kind == "batchnorm"]:
        src_id = bn.inputs[0]
        src = nodes.get(src_id)
        problem = None
        if src is None or src.kind not in ("conv2d", "fc"):
            problem = f"BN {bn.id!r}: input {src_id!r} is not a conv/fc node"
        elif len(g.consumers(src_id)) > 1 or g.output == src_id:
            problem = f"BN {bn.id!r}: producer {src_id!r} has fan-out > 1"
        if problem:
            if mode == "strict":
                raise FoldError("unfoldable", problem)
            log.warning("leaving BN unfused: %s", problem)
            continue
        w_fold, b_fold = fold_weights(g.param(src, "weight"), g.param(src, "bias"),
                                      BnParams.of(g, bn))
        params[src.params["weight"]] = w_fold
        bias_name = src.params.get("bias") or _fresh_name(params, f"{src.id}.bias")
        params[bias_name] = b_fold
        nodes[src_id] = Node(src.id, src.kind, src.inputs, src.attrs,
                             {**src.params, "bias": bias_name})
        for role in ("gamma", "beta", "mean", "var"):
            params.pop(bn.params[role], None)
        del nodes[bn.id]
        order.remove(bn.id)
        for nid in order:
            n = nodes[nid]
            if bn.id in n.inputs:
                nodes[nid] = Node(n.id, n.kind, tuple(src_id if s == bn.id else s
                                                      for s in n.inputs), n.attrs, n.params)
        if output == bn.id:
            output = src_id
    # params shared between a removed BN and a live node stay; drop orphans only
    used = {p for n in nodes.values() for p in n.params.values()}
    params = {k: v for k, v in params.items() if k in used}
    return make_graph(g.name, g.input_shape, [nodes[i] for i in order], params, output)


def _fresh_name(params, base):
    name, i = base, 0
    while name in params:
        i += 1
        name = f"{base}{i}"
    return name
