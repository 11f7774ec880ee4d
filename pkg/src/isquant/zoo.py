"""Desk-scale models and data: the ``tinycnn`` fixture, its synthetic eval set,
and random graphs for differential testing.

``tinycnn`` is conv-bn-relu x3, maxpool, flatten, fc. Its conv weights are
fixed random filters, BN statistics are measured on training images, and the
fc readout is a closed-form ridge regression onto one-hot labels. Nothing is
trained by gradient descent.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import EvalError
from .graph import Node, load_model, make_graph, save_model
from .tensor import read_blob, write_blob

FIXTURE_DIR = Path(__file__).parent / "data" / "tinycnn"
N_CLASSES = 6
IMAGE = 16


def tinycnn_path() -> Path:
    return FIXTURE_DIR / "tinycnn.json"


def load_tinycnn():
    return load_model(tinycnn_path())


def load_dataset(root):
    """(inputs f32 NCHW, labels int) from ``inputs.bin`` / ``labels.bin``."""
    root = Path(root)
    xi, yl = root / "inputs.bin", root / "labels.bin"
    if not xi.is_file() or not yl.is_file():
        raise EvalError("missing_dataset", f"dataset directory {root} needs inputs.bin "
                        "and labels.bin")
    x, y = read_blob(xi), read_blob(yl)
    if x.dtype != np.float32 or x.ndim != 4:
        raise EvalError("bad_dataset", f"{xi}: expected an f32 NCHW blob")
    if y.ndim != 1 or len(y) != len(x):
        raise EvalError("bad_dataset", f"{yl}: expected {len(x)} labels, got shape {y.shape}")
    return x, y.astype(np.int64)


def save_dataset(root, x, y):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_blob(root / "inputs.bin", np.asarray(x, np.float32))
    write_blob(root / "labels.bin", np.asarray(y, np.int32))


def eval_set():
    return load_dataset(FIXTURE_DIR / "eval")


def synthetic_images(rng, n, noise=0.45):
    """Six texture classes: h/v/diagonal/anti-diagonal stripes, blob, checkerboard."""
    yy, xx = np.mgrid[0:IMAGE, 0:IMAGE].astype(np.float64)
    labels = rng.integers(0, N_CLASSES, n)
    out = np.empty((n, 1, IMAGE, IMAGE), np.float32)
    for i, c in enumerate(labels):
        f = rng.uniform(0.12, 0.28) * 2 * np.pi
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.8, 1.3)
        if c == 0:
            img = np.sin(f * yy + ph)
        elif c == 1:
            img = np.sin(f * xx + ph)
        elif c == 2:
            img = np.sin(f * (xx + yy) / np.sqrt(2) + ph)
        elif c == 3:
            img = np.sin(f * (xx - yy) / np.sqrt(2) + ph)
        elif c == 4:
            cy, cx = rng.uniform(5, 11, 2)
            sig = rng.uniform(2.0, 3.5)
            img = 2.5 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2)) - 0.5
        else:
            img = np.sin(f * xx + ph) * np.sin(f * yy + ph) * 1.6
        out[i, 0] = amp * img + noise * rng.standard_normal((IMAGE, IMAGE))
    return out, labels


def _tinycnn_nodes():
    return [
        Node("conv1", "conv2d", ("input",), {"stride": [1, 1], "pad": [1, 1]},
             {"weight": "conv1.weight", "bias": "conv1.bias"}),
        Node("bn1", "batchnorm", ("conv1",), {"epsilon": 1e-5},
             {"gamma": "bn1.gamma", "beta": "bn1.beta", "mean": "bn1.mean", "var": "bn1.var"}),
        Node("relu1", "relu", ("bn1",)),
        Node("conv2", "conv2d", ("relu1",), {"stride": [2, 2], "pad": [1, 1]},
             {"weight": "conv2.weight"}),
        Node("bn2", "batchnorm", ("conv2",), {"epsilon": 1e-5},
             {"gamma": "bn2.gamma", "beta": "bn2.beta", "mean": "bn2.mean", "var": "bn2.var"}),
        Node("relu2", "relu", ("bn2",)),
        Node("conv3", "conv2d", ("relu2",), {"stride": [2, 2], "pad": [1, 1]},
             {"weight": "conv3.weight"}),
        Node("bn3", "batchnorm", ("conv3",), {"epsilon": 1e-5},
             {"gamma": "bn3.gamma", "beta": "bn3.beta", "mean": "bn3.mean", "var": "bn3.var"}),
        Node("relu3", "relu", ("bn3",)),
        Node("pool", "maxpool", ("relu3",), {"k": [2, 2], "stride": [2, 2]}),
        Node("flat", "flatten", ("pool",)),
        Node("fc", "fc", ("flat",), {}, {"weight": "fc.weight", "bias": "fc.bias"}),
    ]


def build_tinycnn(seed=0, n_train=3000, n_eval=1000, ridge=1e-2):
    """Construct the fixture from scratch. Returns (graph, eval_x, eval_y)."""
    from .engine import float_trace

    rng = np.random.default_rng(seed)
    chans = [(1, 8), (8, 16), (16, 16)]
    params = {}
    for i, (ci, co) in enumerate(chans, 1):
        w = rng.standard_normal((co, ci, 3, 3)) / np.sqrt(ci * 9)
        params[f"conv{i}.weight"] = w.astype(np.float32)
        co_ = co
        params[f"bn{i}.gamma"] = rng.uniform(0.6, 1.4, co_).astype(np.float32)
        params[f"bn{i}.beta"] = rng.uniform(-0.1, 0.3, co_).astype(np.float32)
        params[f"bn{i}.mean"] = np.zeros(co_, np.float32)
        params[f"bn{i}.var"] = np.ones(co_, np.float32)
    params["conv1.bias"] = (0.05 * rng.standard_normal(8)).astype(np.float32)
    params["fc.weight"] = np.zeros((N_CLASSES, 64), np.float32)
    params["fc.bias"] = np.zeros(N_CLASSES, np.float32)
    xtr, ytr = synthetic_images(rng, n_train)
    xev, yev = synthetic_images(rng, n_eval)

    # BN running statistics, measured layer by layer on training images
    nodes = _tinycnn_nodes()
    for i in range(1, 4):
        g = make_graph("tinycnn", (1, 1, IMAGE, IMAGE), nodes, params)
        pre = float_trace(g, xtr)[f"conv{i}"].astype(np.float64)
        params[f"bn{i}.mean"] = pre.mean(axis=(0, 2, 3)).astype(np.float32)
        params[f"bn{i}.var"] = pre.var(axis=(0, 2, 3)).astype(np.float32)

    g = make_graph("tinycnn", (1, 1, IMAGE, IMAGE), nodes, params)
    feats = float_trace(g, xtr)["flat"].astype(np.float64)
    design = np.hstack([feats, np.ones((len(feats), 1))])
    target = np.eye(N_CLASSES)[ytr] * 2 - 1
    sol = np.linalg.solve(design.T @ design + ridge * len(feats) * np.eye(design.shape[1]),
                          design.T @ target)
    params["fc.weight"] = sol[:-1].T.astype(np.float32)
    params["fc.bias"] = sol[-1].astype(np.float32)
    return make_graph("tinycnn", (1, 1, IMAGE, IMAGE), nodes, params), xev, yev


def write_fixture(root=FIXTURE_DIR, seed=0):
    g, x, y = build_tinycnn(seed)
    root = Path(root)
    save_model(g, root / "tinycnn.json")
    save_dataset(root / "eval", x, y)
    return g


# --- random graphs --------------------------------------------------------------

def random_graph(rng, n_layers=None, bn=False, name="rand", max_hw=10):
    """A random valid graph with 1-6 conv/fc layers, optional BN after convs.

    Mixes conv(+relu), max/avg pooling, residual adds, and a gap/flatten+fc head.
    """
    if n_layers is None:
        n_layers = int(rng.integers(1, 7))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(4, max_hw + 1))
    w = int(rng.integers(4, max_hw + 1))
    nodes, params = [], {}
    cur, shape = "input", [c, h, w]
    flat = False
    made = 0
    idx = 0

    def uid(prefix):
        nonlocal idx
        idx += 1
        return f"{prefix}{idx}"

    def conv(src, cin, cout, k, stride, pad, relu):
        nid = uid("conv")
        wt = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
        params[f"{nid}.weight"] = wt.astype(np.float32)
        p = {"weight": f"{nid}.weight"}
        if rng.random() < 0.7:
            params[f"{nid}.bias"] = (0.1 * rng.standard_normal(cout)).astype(np.float32)
            p["bias"] = f"{nid}.bias"
        nodes.append(Node(nid, "conv2d", (src,), {"stride": [stride, stride], "pad": [pad, pad]},
                          p))
        out = nid
        if bn:
            bid = uid("bn")
            for role, val in (("gamma", rng.uniform(0.5, 1.5, cout)),
                              ("beta", rng.normal(0, 0.2, cout)),
                              ("mean", rng.normal(0, 0.2, cout)),
                              ("var", rng.uniform(0.2, 2.0, cout))):
                params[f"{bid}.{role}"] = val.astype(np.float32)
            nodes.append(Node(bid, "batchnorm", (out,), {"epsilon": 1e-5},
                              {r: f"{bid}.{r}" for r in ("gamma", "beta", "mean", "var")}))
            out = bid
        if relu:
            rid = uid("relu")
            nodes.append(Node(rid, "relu", (out,)))
            out = rid
        return out

    while made < n_layers:
        last = made == n_layers - 1
        if flat or (last and rng.random() < 0.5):
            if not flat:
                used_gap = rng.random() < 0.5
                if used_gap:
                    gid = uid("gap")
                    nodes.append(Node(gid, "globalavgpool", (cur,)))
                    cur = gid
                fid = uid("flat")
                nodes.append(Node(fid, "flatten", (cur,)))
                cur = fid
                feats = shape[0] if used_gap else int(np.prod(shape))
                shape = [feats]
                flat = True
            nid = uid("fc")
            cout = int(rng.integers(2, 9))
            wt = rng.standard_normal((cout, shape[0])) * np.sqrt(2.0 / shape[0])
            params[f"{nid}.weight"] = wt.astype(np.float32)
            params[f"{nid}.bias"] = (0.1 * rng.standard_normal(cout)).astype(np.float32)
            nodes.append(Node(nid, "fc", (cur,), {}, {"weight": f"{nid}.weight",
                                                     "bias": f"{nid}.bias"}))
            cur, shape = nid, [cout]
            made += 1
            if not last and rng.random() < 0.6:
                rid = uid("relu")
                nodes.append(Node(rid, "relu", (cur,)))
                cur = rid
            continue
        cin, hh, ww = shape
        roll = rng.random()
        if roll < 0.2 and not last:
            # residual block: relu(conv(x)) + x, shape preserving
            y = conv(cur, cin, cin, 3, 1, 1, relu=rng.random() < 0.5)
            aid = uid("add")
            nodes.append(Node(aid, "add", (cur, y)))
            cur = aid
            made += 1
            continue
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2)) if k > 1 else 0
        stride = 2 if (rng.random() < 0.3 and min(hh, ww) >= 4) else 1
        if hh + 2 * pad < k or ww + 2 * pad < k:
            k, pad = 1, 0
        cout = int(rng.integers(1, 7))
        cur = conv(cur, cin, cout, k, stride, pad, relu=rng.random() < 0.7 or not last)
        hh = (hh + 2 * pad - k) // stride + 1
        ww = (ww + 2 * pad - k) // stride + 1
        shape = [cout, hh, ww]
        made += 1
        if not last and min(hh, ww) >= 2 and rng.random() < 0.3:
            kind = "maxpool" if rng.random() < 0.5 else "avgpool"
            pid = uid("pool")
            nodes.append(Node(pid, kind, (cur,), {"k": [2, 2], "stride": [2, 2]}))
            cur = pid
            shape = [cout, hh // 2, ww // 2]
    return make_graph(name, (1, c, h, w), nodes, params, cur)
