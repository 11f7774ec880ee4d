"""Data-free flip rounding of weights (element / kernel / channel error goals).

Start from round-to-nearest, where every element error e = v - q is within 0.5
(element goal). Then, per kernel, flip the ``k`` elements whose error points
most strongly in the direction of the kernel's error sum so that the sum lands
within 0.5 (kernel goal). Finally, per output channel, treat kernel sums as
elements and push the channel sum within 0.5 by one extra flip in each chosen
kernel (channel goal). Channel wins when the two goals conflict; the affected
kernels are flagged in the report.

Flips move a code by exactly one step toward the other rounding neighbour, so
no element error ever reaches 1. Ties go to the lowest flat index.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibError
from .quantizer import QuantParams, quantize, round_half_away
from .tensor import TensorF, TensorQ

log = logging.getLogger(__name__)


@dataclass
class CalibReport:
    shape: tuple
    kernel_ase_before: np.ndarray   # (O, I) |sum e| after nearest rounding
    kernel_ase_after: np.ndarray
    channel_ase_before: np.ndarray  # (O,)
    channel_ase_after: np.ndarray
    flips: np.ndarray               # (O, I) elements whose code differs from nearest
    frozen: int = 0                 # elements clipped by nearest rounding
    flagged_kernels: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    channel_level: bool = True
    elapsed_ms: float = 0.0

    def summary(self, include_timing=False):
        d = {
            "shape": list(self.shape),
            "kernels": int(self.kernel_ase_after.size),
            "max_kernel_ase_before": float(self.kernel_ase_before.max()),
            "max_kernel_ase_after": float(self.kernel_ase_after.max()),
            "mean_kernel_ase_before": float(self.kernel_ase_before.mean()),
            "mean_kernel_ase_after": float(self.kernel_ase_after.mean()),
            "max_channel_ase_before": float(self.channel_ase_before.max()),
            "max_channel_ase_after": float(self.channel_ase_after.max()),
            "total_flips": int(self.flips.sum()),
            "frozen": int(self.frozen),
            "flagged_kernels": len(self.flagged_kernels),
            "channel_level": self.channel_level,
            "warnings": list(self.warnings),
        }
        if include_timing:
            d["elapsed_ms"] = self.elapsed_ms
        return d

    def to_dict(self, include_timing=False):
        d = self.summary(include_timing)
        d.update({
            "kernel_ase_before": self.kernel_ase_before.tolist(),
            "kernel_ase_after": self.kernel_ase_after.tolist(),
            "channel_ase_before": self.channel_ase_before.tolist(),
            "channel_ase_after": self.channel_ase_after.tolist(),
            "flips": self.flips.tolist(),
            "flagged_kernels": [list(k) for k in self.flagged_kernels],
        })
        return d


def flip_count(total):
    """Number of unit flips that bring |total| within 0.5 (ties keep fewer flips)."""
    return np.sign(total) * np.maximum(np.ceil(np.abs(total) - 0.5), 0)


def _kernel_view(arr):
    """Reshape a weight to (O, I, n): conv kernels are H*W windows, fc rows are kernels."""
    if arr.ndim == 4:
        o, i = arr.shape[:2]
        return arr.reshape(o, i, -1), True
    if arr.ndim == 2:
        return arr.reshape(arr.shape[0], 1, arr.shape[1]), False
    return arr.reshape(1, 1, -1), False


def nearest_round(weight: TensorF, p: QuantParams) -> TensorQ:
    return quantize(weight, p)


def _candidates(e, r, rlo, rhi, free, d):
    """Elements that may move one step in direction d (+1 raises the code)."""
    dd = d[..., None]
    ok = (e * dd > 0) & free
    ok &= np.where(dd > 0, r + 1 <= rhi, r - 1 >= rlo)
    return ok


def squant_codes(w, p: QuantParams, channel_level=None):
    """Flip-rounded integer codes (int64, same shape as ``w``) plus a CalibReport."""
    t0 = time.perf_counter()
    w = np.asarray(w, np.float32)
    v_full = w.astype(np.float64) * p.scale_array(w.ndim)
    zp = p.zp_array(w.ndim)
    rlo_full = np.broadcast_to(p.lo - zp, w.shape)
    rhi_full = np.broadcast_to(p.hi - zp, w.shape)

    v, has_channels = _kernel_view(v_full)
    rlo = _kernel_view(np.ascontiguousarray(rlo_full))[0]
    rhi = _kernel_view(np.ascontiguousarray(rhi_full))[0]
    if channel_level is None:
        channel_level = has_channels

    nearest = round_half_away(v)
    r = np.clip(nearest, rlo, rhi)
    free = r == nearest
    r0 = r.copy()
    e = v - r
    warnings = []

    ase_k_before = np.abs(e.sum(-1))
    ase_c_before = np.abs(e.sum((-1, -2)))

    # kernel level
    k = flip_count(e.sum(-1))
    d = np.sign(k)
    cand = _candidates(e, r, rlo, rhi, free, d)
    score = np.where(cand, e * d[..., None], -np.inf)
    order = np.argsort(-score, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(order.shape[-1])[None, None, :], axis=-1)
    pick = cand & (rank < np.abs(k)[..., None])
    r += d[..., None] * pick
    e -= d[..., None] * pick
    short = np.argwhere(pick.sum(-1) < np.abs(k))
    for oi in short:
        warnings.append(f"kernel {tuple(int(x) for x in oi)}: bound unreachable "
                        f"(clip-frozen), ASE {abs(e[tuple(oi)].sum()):.4f}")

    # channel level
    if channel_level:
        for o in range(v.shape[0]):
            s_k = e[o].sum(-1)
            kk = int(flip_count(s_k.sum()))
            if kk == 0:
                continue
            dc = np.full(v.shape[1], np.sign(kk))
            cand_o = _candidates(e[o], r[o], rlo[o], rhi[o], free[o], dc)
            has = cand_o.any(-1)
            kernel_order = np.argsort(-(s_k * np.sign(kk)), kind="stable")
            chosen = [i for i in kernel_order if has[i]][:abs(kk)]
            if len(chosen) < abs(kk):
                warnings.append(f"channel {o}: bound unreachable, "
                                f"{len(chosen)} of {abs(kk)} kernel flips available")
            for i in chosen:
                sc = np.where(cand_o[i], e[o, i] * np.sign(kk), -np.inf)
                j = int(np.argmax(sc))  # first max == lowest index
                r[o, i, j] += np.sign(kk)
                e[o, i, j] -= np.sign(kk)

    ase_k_after = np.abs(e.sum(-1))
    flagged = [tuple(int(x) for x in oi) for oi in np.argwhere(ase_k_after > 0.5)]
    for msg in warnings:
        log.warning("squant: %s", msg)
    q = (r + _kernel_view(np.ascontiguousarray(np.broadcast_to(zp, w.shape)))[0])
    report = CalibReport(
        shape=tuple(w.shape),
        kernel_ase_before=ase_k_before, kernel_ase_after=ase_k_after,
        channel_ase_before=ase_c_before, channel_ase_after=np.abs(e.sum((-1, -2))),
        flips=(r != r0).sum(-1), frozen=int((~free).sum()), flagged_kernels=flagged,
        warnings=warnings, channel_level=bool(channel_level),
        elapsed_ms=(time.perf_counter() - t0) * 1e3)
    return q.astype(np.int64).reshape(w.shape), report


def squant_round(weight: TensorF, p: QuantParams, channel_level=None):
    """Return (TensorQ, CalibReport) for a conv (OIHW) or fc (OI) weight."""
    if not isinstance(weight, TensorF):
        raise CalibError("bad_input", "squant_round expects a TensorF weight")
    q, report = squant_codes(weight.data, p, channel_level)
    return TensorQ(q, p.lo, p.hi), report
