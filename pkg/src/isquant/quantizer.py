"""Quantization parameters and the quantize / dequantize transforms.

Conventions:

* the scale ``s`` is a multiplier, ``q = round(s * x)`` and ``x_hat = q / s``;
* rounding is half-away-from-zero everywhere (``ROUNDING``);
* symmetric ("scale") signed sets clip to [-(2^(b-1) - 1), 2^(b-1) - 1] and use
  ``s = (2^(b-1) - 1) / max|x|`` so that the whole observed range is covered;
  unsigned sets use ``s = (2^b - 1) / max(x)`` on [0, 2^b - 1];
* asymmetric ("affine") sets use ``s = (2^b - 1) / (alpha - beta)`` and
  ``z = -round(beta * s) - 2^(b-1)`` (signed) or ``-round(beta * s)`` (unsigned).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import QuantError
from .tensor import TensorF, TensorQ

ROUNDING = "half_away_from_zero"

SCALE = "scale"        # symmetric, z = 0
AFFINE = "affine"      # asymmetric
SCHEMES = (SCALE, AFFINE)
PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"
GRANULARITIES = (PER_TENSOR, PER_CHANNEL)
SIGNED = "signed"
UNSIGNED = "unsigned"

SCHEME_ALIASES = {"symmetric": SCALE, "asymmetric": AFFINE, SCALE: SCALE, AFFINE: AFFINE}
GRANULARITY_ALIASES = {"per-tensor": PER_TENSOR, "per-channel": PER_CHANNEL,
                       PER_TENSOR: PER_TENSOR, PER_CHANNEL: PER_CHANNEL}


def round_half_away(a):
    """Round to nearest integer, ties away from zero. Exact for float64 input."""
    a = np.asarray(a, dtype=np.float64)
    mag = np.abs(a)
    fl = np.floor(mag)
    r = fl + (mag - fl >= 0.5)
    return np.copysign(r, a)


def _f32(v):
    return float(np.float32(v))


def qrange(bits, scheme, signed):
    if signed:
        if scheme == SCALE:
            return -(2 ** (bits - 1) - 1), 2 ** (bits - 1) - 1
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass(frozen=True)
class QuantParams:
    """(s, z, b, alpha, beta) for one number set, or one tuple entry per channel."""

    scheme: str
    granularity: str
    bits: int
    signed: bool
    scale: tuple
    zero_point: tuple
    alpha: tuple
    beta: tuple

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise QuantError("bad_scheme", f"unknown scheme {self.scheme!r}")
        if self.granularity not in GRANULARITIES:
            raise QuantError("bad_granularity", f"unknown granularity {self.granularity!r}")
        if not 2 <= self.bits <= 8:
            raise QuantError("bad_bits", f"bits must be in [2, 8], got {self.bits}")
        n = len(self.scale)
        if not (n == len(self.zero_point) == len(self.alpha) == len(self.beta)) or n == 0:
            raise QuantError("bad_params", "per-channel vectors differ in length")
        if self.granularity == PER_TENSOR and n != 1:
            raise QuantError("bad_params", "per-tensor params must hold exactly one entry")
        if not all(np.isfinite(s) and s > 0 for s in self.scale):
            raise QuantError("bad_params", f"scale must be finite and > 0: {self.scale}")
        if self.scheme == SCALE and (any(self.zero_point) or any(self.beta)):
            raise QuantError("bad_params", "scale scheme requires z = 0 and beta = 0")

    @property
    def lo(self):
        return qrange(self.bits, self.scheme, self.signed)[0]

    @property
    def hi(self):
        return qrange(self.bits, self.scheme, self.signed)[1]

    @property
    def s(self) -> float:
        if len(self.scale) != 1:
            raise QuantError("bad_params", "per-channel params have no single scale")
        return self.scale[0]

    @property
    def z(self) -> int:
        if len(self.zero_point) != 1:
            raise QuantError("bad_params", "per-channel params have no single zero-point")
        return self.zero_point[0]

    @property
    def channels(self):
        return len(self.scale)

    def channel(self, i) -> "QuantParams":
        return QuantParams(self.scheme, PER_TENSOR, self.bits, self.signed, (self.scale[i],),
                           (self.zero_point[i],), (self.alpha[i],), (self.beta[i],))

    def scale_array(self, ndim=1):
        """Scales shaped to broadcast along axis 0 of an ``ndim`` tensor."""
        return np.asarray(self.scale, np.float64).reshape((-1,) + (1,) * (ndim - 1))

    def zp_array(self, ndim=1):
        return np.asarray(self.zero_point, np.int64).reshape((-1,) + (1,) * (ndim - 1))

    def to_dict(self):
        return {"scheme": self.scheme, "granularity": self.granularity, "bits": self.bits,
                "signed": self.signed, "scale": list(self.scale),
                "zero_point": list(self.zero_point), "alpha": list(self.alpha),
                "beta": list(self.beta)}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["scheme"], d["granularity"], int(d["bits"]), bool(d["signed"]),
                       tuple(float(v) for v in d["scale"]),
                       tuple(int(v) for v in d["zero_point"]),
                       tuple(float(v) for v in d["alpha"]), tuple(float(v) for v in d["beta"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise QuantError("bad_params", f"malformed quant params: {exc}") from None


def _one_set(x, bits, scheme, signed, allow_degenerate):
    """(s, z, alpha, beta) for one flat number set."""
    x = np.asarray(x, np.float64)
    if not signed and x.min() < 0:
        raise QuantError("not_unsigned", f"unsigned number set has min {x.min()} < 0")
    if scheme == SCALE:
        alpha = float(np.abs(x).max()) if signed else float(x.max())
        beta = 0.0
        levels = 2 ** (bits - 1) - 1 if signed else 2**bits - 1
        span = alpha
    else:
        alpha = max(float(x.max()), 0.0)
        beta = min(float(x.min()), 0.0)
        levels = 2**bits - 1
        span = alpha - beta
    if span <= 0:
        if not allow_degenerate:
            raise QuantError("degenerate_range", "number set is all zero (alpha == beta)")
        return 1.0, 0, _f32(alpha), _f32(beta)
    s = _f32(levels / span)
    if s * span > levels:
        # f32 rounding pushed the grid past the code range; step down one ulp so the
        # endpoints still land within half a step
        s = float(np.nextafter(np.float32(s), np.float32(0)))
    if not (np.isfinite(s) and s > 0):
        if not allow_degenerate:
            raise QuantError("degenerate_range", f"scale {s} is not finite and positive")
        return 1.0, 0, _f32(alpha), _f32(beta)
    z = 0
    if scheme == AFFINE:
        z = int(-round_half_away(beta * s))
        if signed:
            z -= 2 ** (bits - 1)
    return s, z, _f32(alpha), _f32(beta)


def compute_params(values, bits=8, scheme=SCALE, granularity=PER_TENSOR, signed=True,
                   allow_degenerate=False) -> QuantParams:
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    granularity = GRANULARITY_ALIASES.get(granularity, granularity)
    if scheme not in SCHEMES:
        raise QuantError("bad_scheme", f"unknown scheme {scheme!r}")
    if granularity not in GRANULARITIES:
        raise QuantError("bad_granularity", f"unknown granularity {granularity!r}")
    if not 2 <= int(bits) <= 8:
        raise QuantError("bad_bits", f"bits must be in [2, 8], got {bits}")
    x = values.data if isinstance(values, TensorF) else np.asarray(values, np.float32)
    if x.size == 0:
        raise QuantError("empty", "cannot quantize an empty number set")
    if granularity == PER_TENSOR:
        sets = [x.ravel()]
    else:
        sets = [x[c].ravel() for c in range(x.shape[0])]
    rows = [_one_set(v, int(bits), scheme, signed, allow_degenerate) for v in sets]
    s, z, a, b = zip(*rows)
    return QuantParams(scheme, granularity, int(bits), bool(signed), s, z, a, b)


def quantize_array(x, p: QuantParams):
    """Integer codes (int64 array) for a raw array; per-channel along axis 0."""
    x = np.asarray(x)
    v = x.astype(np.float64) * p.scale_array(x.ndim)
    q = round_half_away(v).astype(np.int64) + p.zp_array(x.ndim)
    return np.clip(q, p.lo, p.hi)


def dequantize_array(q, p: QuantParams):
    """Float64 reconstruction (q - z) / s."""
    q = np.asarray(q, np.int64)
    return (q - p.zp_array(q.ndim)).astype(np.float64) / p.scale_array(q.ndim)


def quantize(values: TensorF, p: QuantParams) -> TensorQ:
    return TensorQ(quantize_array(values.data, p), p.lo, p.hi)


def dequantize(q: TensorQ, p: QuantParams) -> TensorF:
    return TensorF(dequantize_array(q.data, p).astype(np.float32))


def activation_signedness(g):
    """Node id -> True if the node's output is a signed number set.

    Relu outputs are unsigned; pooling/flatten of an unsigned set stay unsigned,
    as does an add of two unsigned sets. Everything else is signed.
    """
    signed = {"input": True}
    for n in g.nodes:
        if n.kind == "relu":
            signed[n.id] = False
        elif n.kind in ("maxpool", "avgpool", "globalavgpool", "flatten"):
            signed[n.id] = signed[n.inputs[0]]
        elif n.kind == "add":
            signed[n.id] = signed[n.inputs[0]] or signed[n.inputs[1]]
        else:
            signed[n.id] = True
    return signed


def calibration_batches(g, n_batches=32, seed=0, batch_size=8):
    """Seeded standard-normal inputs; the only data activation calibration sees."""
    rng = np.random.default_rng(seed)
    shape = (batch_size,) + tuple(g.input_shape[1:])
    for _ in range(n_batches):
        yield rng.standard_normal(shape, dtype=np.float32)


def calibrate_activations(g, n_batches=32, seed=0, bits=8, scheme=SCALE, batch_size=8,
                          allow_degenerate=False) -> dict:
    """Static per-tensor activation params for every node (and ``"input"``)."""
    from .engine import float_trace

    if n_batches < 1:
        raise QuantError("bad_batches", "n_batches must be >= 1")
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    signed = activation_signedness(g)
    lo, hi = {}, {}
    for batch in calibration_batches(g, n_batches, seed, batch_size):
        for nid, y in float_trace(g, batch).items():
            lo[nid] = min(lo.get(nid, np.inf), float(y.min()))
            hi[nid] = max(hi.get(nid, -np.inf), float(y.max()))
    out = {}
    for nid in lo:
        pair = np.array([lo[nid], hi[nid]], np.float32)
        if not signed[nid]:
            pair = np.maximum(pair, 0)
        try:
            out[nid] = compute_params(pair, bits, scheme, PER_TENSOR, signed[nid],
                                      allow_degenerate)
        except QuantError as exc:
            raise QuantError(exc.code, f"activation of node {nid!r}: {exc.message}") from None
    return out
