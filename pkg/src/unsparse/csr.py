"""Modified CSR weight format: uniform non-zeros per output channel,
column indices precomputed as flattened offsets into a padded input sample.

Channels with fewer genuine non-zeros than the layer maximum are padded
with explicit zero-weight entries so every row-pointer slice has the same
length; the engine multiplies them by zero instead of branching.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import ConvGeometry, DenseTensor4, PrecisionMode


class CsrCorruptionError(ValueError):
    """A stored offset does not decode to a valid filter tap."""


def tap_to_offset(c: int, kh: int, kw: int, geometry: ConvGeometry) -> int:
    """Flattened offset of filter tap (c, kh, kw) inside one padded sample."""
    return (c * geometry.padded_h + kh) * geometry.padded_w + kw


def offset_to_tap(offset: int, geometry: ConvGeometry) -> tuple[int, int, int]:
    """Inverse of tap_to_offset; raises CsrCorruptionError for non-taps."""
    if offset < 0 or offset >= geometry.x_size:
        raise CsrCorruptionError(f"offset {offset} outside padded sample")
    plane = geometry.padded_h * geometry.padded_w
    c, rem = divmod(int(offset), plane)
    kh, kw = divmod(rem, geometry.padded_w)
    if kh >= geometry.filter_h or kw >= geometry.filter_w:
        raise CsrCorruptionError(
            f"offset {offset} decodes to ({c},{kh},{kw}), not a "
            f"{geometry.filter_h}x{geometry.filter_w} tap"
        )
    return c, kh, kw


@dataclass(frozen=True)
class CsrFilter:
    """(row_ptr, col_offsets, weights) triple with uniform per-channel nnz."""

    row_ptr: np.ndarray
    col_offsets: np.ndarray
    weights: np.ndarray
    n_nz: int
    geometry: ConvGeometry
    precision: PrecisionMode = PrecisionMode.BINARY32

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", np.ascontiguousarray(self.row_ptr, np.int64))
        object.__setattr__(
            self, "col_offsets", np.ascontiguousarray(self.col_offsets, np.int64)
        )
        object.__setattr__(self, "weights", np.ascontiguousarray(self.weights, np.float32))
        self.validate()
        for a in (self.row_ptr, self.col_offsets, self.weights):
            a.flags.writeable = False

    def validate(self) -> None:
        g = self.geometry
        D = g.out_channels
        if self.row_ptr.shape != (D + 1,) or self.row_ptr[0] != 0:
            raise CsrCorruptionError("row_ptr must have length D+1 and start at 0")
        diffs = np.diff(self.row_ptr)
        if not np.all(diffs == self.n_nz):
            raise CsrCorruptionError("row_ptr slices are not uniform")
        if len(self.col_offsets) != D * self.n_nz or len(self.weights) != D * self.n_nz:
            raise CsrCorruptionError("col_offsets/weights length must be D*n_nz")
        lam = self.col_offsets
        plane = g.padded_h * g.padded_w
        kh, kw = np.divmod(lam % plane, g.padded_w)
        bad = (
            (lam < 0) | (lam >= g.x_size) | (kh >= g.filter_h) | (kw >= g.filter_w)
        )
        if bad.any():
            offset_to_tap(int(lam[np.argmax(bad)]), g)  # raises with detail


def build_csr(dense_weights: DenseTensor4, geometry: ConvGeometry) -> CsrFilter:
    """Convert a dense D x C x H_f x W_f filter into the uniform-nnz format.

    n_nz is the maximum per-output-channel non-zero count (at least 1, so an
    all-zero filter still yields uniform one-entry slices). Genuine entries
    are stored in ascending offset order; padding entries carry weight 0 at
    offset 0, which always decodes to tap (0, 0, 0).
    """
    geometry.check_weights(dense_weights)
    w = dense_weights.data
    D = geometry.out_channels
    per_channel = []
    for d in range(D):
        cs, khs, kws = np.nonzero(w[d])
        offsets = (cs * geometry.padded_h + khs) * geometry.padded_w + kws
        order = np.argsort(offsets, kind="stable")
        per_channel.append((offsets[order], w[d][cs[order], khs[order], kws[order]]))
    n_nz = max(1, max(len(o) for o, _ in per_channel))
    col_offsets = np.zeros(D * n_nz, dtype=np.int64)
    weights = np.zeros(D * n_nz, dtype=np.float32)
    row_ptr = np.arange(D + 1, dtype=np.int64) * n_nz
    for d, (offsets, vals) in enumerate(per_channel):
        pad = n_nz - len(offsets)
        col_offsets[row_ptr[d] + pad : row_ptr[d + 1]] = offsets
        weights[row_ptr[d] + pad : row_ptr[d + 1]] = vals
    return CsrFilter(row_ptr, col_offsets, weights, n_nz, geometry,
                     dense_weights.precision)


def csr_to_dense(filt: CsrFilter) -> DenseTensor4:
    """Scatter back to a dense filter tensor; explicit zeros contribute nothing."""
    g = filt.geometry
    out = np.zeros(
        (g.out_channels, g.in_channels, g.filter_h, g.filter_w), dtype=np.float32
    )
    for d in range(g.out_channels):
        for i in range(filt.row_ptr[d], filt.row_ptr[d + 1]):
            v = filt.weights[i]
            if v == 0.0:
                continue
            c, kh, kw = offset_to_tap(int(filt.col_offsets[i]), g)
            out[d, c, kh, kw] = v
    return DenseTensor4(out, filt.precision)


def effective_sparsity(filt: CsrFilter) -> float:
    """Zero fraction of the underlying dense filter; padding entries count as zeros."""
    g = filt.geometry
    total = g.out_channels * g.in_channels * g.filter_h * g.filter_w
    genuine = int(np.count_nonzero(filt.weights))
    return 1.0 - genuine / total


_GEO_FIELDS = (
    "in_channels", "out_channels", "filter_h", "filter_w",
    "input_h", "input_w",
)


def save_csr(filt: CsrFilter, path) -> None:
    """Binary export plus a JSON sidecar at <path>.json.

    Layout, all little-endian: 12 u32 (the 6 geometry dims, stride pair,
    padding pair, n_nz, precision tag), then row_ptr as u32, col_offsets as
    u32, weights as f4 (binary32) or f2 (binary16).
    """
    g = filt.geometry
    head = [getattr(g, f) for f in _GEO_FIELDS]
    head += [g.stride[0], g.stride[1], g.padding[0], g.padding[1],
             filt.n_nz, filt.precision.to_u8()]
    payload = struct.pack("<12I", *head)
    payload += filt.row_ptr.astype("<u4").tobytes()
    payload += filt.col_offsets.astype("<u4").tobytes()
    if filt.precision is PrecisionMode.BINARY16:
        payload += filt.weights.astype("<f2").tobytes()
    else:
        payload += filt.weights.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(payload)
    sidecar = {
        "n_nz": filt.n_nz,
        "out_channels": g.out_channels,
        "genuine_nonzeros": int(np.count_nonzero(filt.weights)),
        "sparsity": effective_sparsity(filt),
        "precision": filt.precision.tag,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_csr(path) -> CsrFilter:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.unpack("<12I", blob[:48])
    geometry = ConvGeometry(
        *head[:6], stride=(head[6], head[7]), padding=(head[8], head[9])
    )
    n_nz, tag = head[10], head[11]
    precision = PrecisionMode.from_u8(tag)
    D = geometry.out_channels
    off = 48
    row_ptr = np.frombuffer(blob, dtype="<u4", count=D + 1, offset=off).astype(np.int64)
    off += 4 * (D + 1)
    col = np.frombuffer(blob, dtype="<u4", count=D * n_nz, offset=off).astype(np.int64)
    off += 4 * D * n_nz
    if precision is PrecisionMode.BINARY16:
        w = np.frombuffer(blob, dtype="<f2", count=D * n_nz, offset=off).astype(np.float32)
    else:
        w = np.frombuffer(blob, dtype="<f4", count=D * n_nz, offset=off).astype(np.float32)
    return CsrFilter(row_ptr, col, w, n_nz, geometry, precision)
