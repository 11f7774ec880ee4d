"""Dense NCHW tensors in the real (f32), quantized (int8) and accumulator (int32) zones.

The convolution kernels here are the ground floor for every execution path.
Accumulation order is fixed: for each output element the sum runs over input
channel, then kernel row, then kernel column. Vectorisation happens only across
output channels and spatial positions, so f32 results are bit-reproducible.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OverflowError32, TensorError

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

BLOB_MAGIC = b"ISQT"
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int32): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

Shape = tuple  # tuple[int, ...], every dim >= 1


def check_shape(dims) -> Shape:
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise TensorError("bad_shape", "shape must have at least one dim")
    if any(d < 1 for d in dims):
        raise TensorError("bad_shape", f"every dim must be >= 1, got {dims}")
    return dims


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TensorF:
    """Real-zone tensor. Rejects NaN/Inf."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        check_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise TensorError("non_finite", "TensorF data contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def shape(self) -> Shape:
        return self.data.shape

    def __eq__(self, other):
        return (isinstance(other, TensorF) and self.shape == other.shape
                and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TensorQ:
    """Quantized-zone tensor with a declared integer range [lo, hi].

    Values are stored widened to int32 so unsigned 8-bit codes (up to 255) fit.
    """

    data: np.ndarray
    lo: int = -127
    hi: int = 127

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(raw, 1), 0)):
                raise TensorError("not_integral", "TensorQ data must be integer valued")
        arr = raw.astype(np.int32)
        check_shape(arr.shape)
        if self.lo > self.hi:
            raise TensorError("bad_range", f"lo {self.lo} > hi {self.hi}")
        if arr.size and (arr.min() < self.lo or arr.max() > self.hi):
            raise TensorError(
                "out_of_range",
                f"TensorQ values [{arr.min()}, {arr.max()}] outside [{self.lo}, {self.hi}]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def shape(self) -> Shape:
        return self.data.shape

    def __eq__(self, other):
        return (isinstance(other, TensorQ) and (self.lo, self.hi) == (other.lo, other.hi)
                and self.shape == other.shape and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TensorAcc:
    """int32 accumulator produced by integer conv/matmul."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        check_int32(arr, "accumulator")
        arr = arr.astype(np.int32)
        check_shape(arr.shape)
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def shape(self) -> Shape:
        return self.data.shape

    def __eq__(self, other):
        return (isinstance(other, TensorAcc) and self.shape == other.shape
                and np.array_equal(self.data, other.data))

    __hash__ = None


def check_int32(arr, what="value"):
    """Raise if any entry of an integer array falls outside int32."""
    if arr.size == 0:
        return
    lo, hi = int(arr.min()), int(arr.max())
    if lo < INT32_MIN or hi > INT32_MAX:
        raise OverflowError32(f"{what} range [{lo}, {hi}] exceeds int32")


def conv_output_hw(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad[0] - kh) // stride[0] + 1
    wo = (w + 2 * pad[1] - kw) // stride[1] + 1
    return ho, wo


def conv_accumulate(x, w, stride=(1, 1), pad=(0, 0), dtype=np.float32, pad_value=0):
    """Direct cross-correlation over raw arrays, accumulated in ``dtype``.

    ``x`` is NCHW, ``w`` is OIHW. Returns N x O x Ho x Wo. Shared by the f32
    reference path, the f64 fake-quant path and the int64 integer paths.
    """
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise TensorError("shape_mismatch", f"input has {c} channels, weight expects {ci}")
    sh, sw = stride
    ph, pw = pad
    ho, wo = conv_output_hw(h, wd, kh, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise TensorError("shape_mismatch", f"conv output {ho}x{wo} is empty")
    x = x.astype(dtype, copy=False)
    w = w.astype(dtype, copy=False)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=pad_value)
    out = np.zeros((n, o, ho, wo), dtype=dtype)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = x[:, ch, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                out += patch[:, None, :, :] * w[None, :, ch, i, j, None, None]
    return out


def linear_accumulate(x, w, dtype=np.float32):
    """y[n, o] = sum_i x[n, i] * w[o, i], summed in index order."""
    if x.shape[1] != w.shape[1]:
        raise TensorError("shape_mismatch",
                          f"fc input has {x.shape[1]} features, weight expects {w.shape[1]}")
    x = x.astype(dtype, copy=False)
    w = w.astype(dtype, copy=False)
    out = np.zeros((x.shape[0], w.shape[0]), dtype=dtype)
    for i in range(x.shape[1]):
        out += x[:, i, None] * w[None, :, i]
    return out


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv2d_f32(input: TensorF, weight: TensorF, bias: TensorF | None = None,
               stride=(1, 1), pad=(0, 0)) -> TensorF:
    x, w = input.data, weight.data
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError("shape_mismatch", "conv2d expects NCHW input and OIHW weight")
    out = conv_accumulate(x, w, _pair(stride), _pair(pad), np.float32)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise TensorError("shape_mismatch", f"bias shape {bias.shape} != ({w.shape[0]},)")
        out += bias.data[None, :, None, None]
    if not np.all(np.isfinite(out)):
        raise TensorError("non_finite", "conv2d_f32 produced a non-finite value")
    return TensorF(out)


def conv2d_int(input: TensorQ, weight: TensorQ, stride=(1, 1), pad=(0, 0)) -> TensorAcc:
    """Exact integer convolution; padding inserts integer 0."""
    x, w = input.data, weight.data
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError("shape_mismatch", "conv2d expects NCHW input and OIHW weight")
    acc = conv_accumulate(x, w, _pair(stride), _pair(pad), np.int64)
    check_int32(acc, "conv2d_int accumulator")
    return TensorAcc(acc)


# --- blob files -------------------------------------------------------------

def write_blob(path, arr) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("=")
    if dt not in DTYPE_CODES:
        raise TensorError("bad_dtype", f"unsupported blob dtype {arr.dtype}")
    header = BLOB_MAGIC + struct.pack("<II", DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()
    Path(path).write_bytes(header + payload)


def read_blob(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != BLOB_MAGIC or len(raw) < 12:
        raise TensorError("bad_blob", f"{path}: missing ISQT header")
    code, rank = struct.unpack_from("<II", raw, 4)
    if code not in CODE_DTYPES:
        raise TensorError("bad_blob", f"{path}: unknown dtype code {code}")
    off = 12 + 4 * rank
    if len(raw) < off:
        raise TensorError("bad_blob", f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 12)
    dt = CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - off != count * dt.itemsize:
        raise TensorError("bad_blob", f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=dt, offset=off).reshape(dims).astype(CODE_DTYPES[code])
