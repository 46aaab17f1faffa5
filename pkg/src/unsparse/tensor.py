"""Numeric tensors, precision modes and the dense reference convolution.

Everything downstream (CSR weights, the sparse engine, the trainer) is
checked against the dense reference implemented here, so this module has
no dependencies on the rest of the package.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

BINARY16_MAX = 65504.0


class PrecisionMode(enum.Enum):
    """Numeric mode of a tensor.

    BINARY16 is emulated: stored values are rounded to IEEE 754 binary16
    (round-to-nearest-even, overflow saturated to +-65504) while all sums
    are accumulated in binary32.
    """

    BINARY32 = "binary32"
    BINARY16 = "binary16-emulated"

    @property
    def tag(self) -> str:
        return self.value

    def to_u8(self) -> int:
        return 0 if self is PrecisionMode.BINARY32 else 1

    @staticmethod
    def from_u8(v: int) -> "PrecisionMode":
        if v == 0:
            return PrecisionMode.BINARY32
        if v == 1:
            return PrecisionMode.BINARY16
        raise ValueError(f"unknown precision tag {v}")


def round_to_binary16(x):
    """Round to the nearest binary16-representable value (ties to even).

    Magnitudes beyond the binary16 range saturate to +-65504 instead of
    overflowing to infinity; NaN propagates. Accepts scalars or arrays and
    returns binary32 values on the binary16 grid.
    """
    arr = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        res = arr.astype(np.float16).astype(np.float32)
    overflow = np.isinf(res) & np.isfinite(arr)
    if overflow.any():
        res = np.where(overflow, np.copysign(np.float32(BINARY16_MAX), arr), res)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(res)
    return res


@dataclass(frozen=True)
class DenseTensor4:
    """Batch-major NCHW tensor: shape (n, c, h, w), contiguous binary32 data.

    Flattened index of element (b, ch, y, x) is ((b*c + ch)*h + y)*w + x.
    Instances are immutable; the data buffer is marked read-only.
    """

    data: np.ndarray
    precision: PrecisionMode = PrecisionMode.BINARY32

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"expected 4-d NCHW data, got shape {self.data.shape}")
        if self.data.dtype != np.float32 or not self.data.flags.c_contiguous:
            object.__setattr__(
                self, "data", np.ascontiguousarray(self.data, dtype=np.float32)
            )
        self.data.flags.writeable = False

    @classmethod
    def from_array(cls, arr, precision: PrecisionMode = PrecisionMode.BINARY32):
        """Build a tensor, rounding values onto the binary16 grid when needed."""
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if precision is PrecisionMode.BINARY16:
            arr = round_to_binary16(arr)
        return cls(arr, precision)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def flatten_index(self, b: int, ch: int, y: int, x: int) -> int:
        _, c, h, w = self.shape
        return ((b * c + ch) * h + y) * w + x

    def unflatten_index(self, i: int) -> tuple[int, int, int, int]:
        _, c, h, w = self.shape
        x = i % w
        i //= w
        y = i % h
        i //= h
        ch = i % c
        return i // c, ch, y, x

    def save(self, path) -> None:
        """Serialize: 4 little-endian u32 dims, u8 precision tag, raw values.

        binary32 values are 4 bytes each, binary16 values 2 bytes each.
        """
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4IB", *self.shape, self.precision.to_u8()))
            if self.precision is PrecisionMode.BINARY16:
                fh.write(self.data.astype("<f2").tobytes())
            else:
                fh.write(self.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "DenseTensor4":
        with open(path, "rb") as fh:
            header = fh.read(17)
            if len(header) != 17:
                raise ValueError("truncated tensor header")
            n, c, h, w, tag = struct.unpack("<4IB", header)
            precision = PrecisionMode.from_u8(tag)
            count = n * c * h * w
            dt = "<f2" if precision is PrecisionMode.BINARY16 else "<f4"
            raw = np.frombuffer(fh.read(), dtype=dt, count=count)
            if raw.size != count:
                raise ValueError("truncated tensor payload")
        data = raw.astype(np.float32).reshape(n, c, h, w)
        return cls(data, precision)


@dataclass(frozen=True)
class ConvGeometry:
    """Shape bookkeeping for one convolution layer.

    Output dims must divide exactly: Y_h = (X_h + 2*h_pad - H_f)/s_h + 1,
    and likewise for the width. x_size is the per-sample length of the
    zero-padded input, which the precomputed CSR offsets index into.
    """

    in_channels: int
    out_channels: int
    filter_h: int
    filter_w: int
    input_h: int
    input_w: int
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        s_h, s_w = self.stride
        h_pad, w_pad = self.padding
        for name, v in (("stride_h", s_h), ("stride_w", s_w)):
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if h_pad < 0 or w_pad < 0:
            raise ValueError("padding must be non-negative")
        num_h = self.input_h + 2 * h_pad - self.filter_h
        num_w = self.input_w + 2 * w_pad - self.filter_w
        if num_h < 0 or num_w < 0:
            raise ValueError("filter larger than padded input")
        if num_h % s_h or num_w % s_w:
            raise ValueError(
                f"output dims not integral for geometry {self}: "
                f"({num_h} % {s_h}, {num_w} % {s_w})"
            )

    @property
    def out_h(self) -> int:
        return (self.input_h + 2 * self.padding[0] - self.filter_h) // self.stride[0] + 1

    @property
    def out_w(self) -> int:
        return (self.input_w + 2 * self.padding[1] - self.filter_w) // self.stride[1] + 1

    @property
    def padded_h(self) -> int:
        return self.input_h + 2 * self.padding[0]

    @property
    def padded_w(self) -> int:
        return self.input_w + 2 * self.padding[1]

    @property
    def x_size(self) -> int:
        return self.in_channels * self.padded_h * self.padded_w

    def check_input(self, t: DenseTensor4) -> None:
        if (t.c, t.h, t.w) != (self.in_channels, self.input_h, self.input_w):
            raise ValueError(
                f"input shape {t.shape[1:]} does not match geometry "
                f"({self.in_channels}, {self.input_h}, {self.input_w})"
            )

    def check_weights(self, w: DenseTensor4) -> None:
        expected = (self.out_channels, self.in_channels, self.filter_h, self.filter_w)
        if w.shape != expected:
            raise ValueError(f"weight shape {w.shape} does not match geometry {expected}")


def zero_pad(t: DenseTensor4, geometry: ConvGeometry) -> DenseTensor4:
    """Materialize the zero-padded input layout the CSR offsets index into."""
    geometry.check_input(t)
    h_pad, w_pad = geometry.padding
    if h_pad == 0 and w_pad == 0:
        return t
    padded = np.zeros(
        (t.n, t.c, geometry.padded_h, geometry.padded_w), dtype=np.float32
    )
    padded[:, :, h_pad : h_pad + t.h, w_pad : w_pad + t.w] = t.data
    return DenseTensor4(padded, t.precision)


def extract_interior(t: DenseTensor4, geometry: ConvGeometry) -> DenseTensor4:
    """Inverse of zero_pad: crop the padding border back off."""
    h_pad, w_pad = geometry.padding
    if h_pad == 0 and w_pad == 0:
        return t
    data = t.data[:, :, h_pad : h_pad + geometry.input_h, w_pad : w_pad + geometry.input_w]
    return DenseTensor4(np.ascontiguousarray(data), t.precision)


def dense_conv_reference(
    input: DenseTensor4,
    weights: DenseTensor4,
    geometry: ConvGeometry,
    workers: int = 1,
) -> DenseTensor4:
    """Direct dense cross-correlation, the correctness oracle for the package.

    out[b,d,r,c] = sum over (ch, kh, kw) of w[d,ch,kh,kw] * x_pad[b,ch,r*s_h+kh,c*s_w+kw]

    No kernel flipping. The loop order is cache-friendly (an accumulator row
    per output row, written once) but the arithmetic is the plain quadruple
    sum. `workers` splits output channels across threads; every output
    element has a single writer, so results do not depend on it.
    """
    geometry.check_input(input)
    geometry.check_weights(weights)
    if input.precision is not weights.precision:
        raise ValueError("input and weight precisions differ")
    xpad = zero_pad(input, geometry).data
    out = np.zeros(
        (input.n, geometry.out_channels, geometry.out_h, geometry.out_w),
        dtype=np.float32,
    )
    s_h, s_w = geometry.stride
    D = geometry.out_channels
    if workers <= 1 or D == 1:
        kernels.dense_conv_channels(xpad, weights.data, out, 0, D, s_h, s_w)
    else:
        from concurrent.futures import ThreadPoolExecutor

        workers = min(workers, D)
        bounds = np.linspace(0, D, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [
                pool.submit(
                    kernels.dense_conv_channels,
                    xpad, weights.data, out, int(bounds[i]), int(bounds[i + 1]), s_h, s_w,
                )
                for i in range(workers)
            ]
            for f in futs:
                f.result()
    if input.precision is PrecisionMode.BINARY16:
        out = round_to_binary16(out)
    return DenseTensor4(out, input.precision)
