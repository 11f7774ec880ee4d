"""Independent brute-force references, kept deliberately naive."""
import numpy as np


def conv_direct(x, w, b=None, stride=(1, 1), pad=(0, 0), dtype=np.float64):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad[0], wd + 2 * pad[1]), dtype)
    xp[:, :, pad[0]:pad[0] + h, pad[1]:pad[1] + wd] = x
    ho = (h + 2 * pad[0] - kh) // stride[0] + 1
    wo = (wd + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((n, o, ho, wo), dtype)
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    acc = dtype(0)
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[i, ic, r * stride[0] + u, q * stride[1] + v]
                                        * w[oc, ic, u, v])
                    out[i, oc, r, q] = acc + (0 if b is None else b[oc])
    return out


def run_graph_direct(g, x):
    """Float64 reference interpreter using only the nested-loop conv above."""
    vals = {"input": np.asarray(x, np.float64)}
    for n in g.nodes:
        a = vals[n.inputs[0]]
        p = {r: g.params[name].data.astype(np.float64) for r, name in n.params.items()}
        if n.kind == "conv2d":
            y = conv_direct(a, p["weight"], p.get("bias"), tuple(n.stride), tuple(n.pad))
        elif n.kind == "fc":
            y = a @ p["weight"].T + (p["bias"] if "bias" in p else 0)
        elif n.kind == "batchnorm":
            sh = (1, -1) + (1,) * (a.ndim - 2)
            y = ((a - p["mean"].reshape(sh)) / np.sqrt(p["var"].reshape(sh) + n.epsilon)
                 * p["gamma"].reshape(sh) + p["beta"].reshape(sh))
        elif n.kind == "relu":
            y = np.maximum(a, 0)
        elif n.kind in ("maxpool", "avgpool"):
            (kh, kw), (sh_, sw) = n.kernel, n.stride
            ho, wo = (a.shape[2] - kh) // sh_ + 1, (a.shape[3] - kw) // sw + 1
            y = np.zeros(a.shape[:2] + (ho, wo))
            for r in range(ho):
                for c in range(wo):
                    win = a[:, :, r * sh_:r * sh_ + kh, c * sw:c * sw + kw]
                    y[:, :, r, c] = win.max((2, 3)) if n.kind == "maxpool" else win.mean((2, 3))
        elif n.kind == "globalavgpool":
            y = a.mean((2, 3), keepdims=True)
        elif n.kind == "flatten":
            y = a.reshape(len(a), -1)
        elif n.kind == "add":
            y = a + vals[n.inputs[1]]
        else:
            raise ValueError(n.kind)
        vals[n.id] = y
    return vals[g.output]
