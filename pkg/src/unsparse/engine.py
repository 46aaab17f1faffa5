"""Direct sparse convolution over CSR filters.

The GPU block/thread decomposition is mapped onto a deterministic CPU
schedule: one virtual block owns one output channel for a contiguous group
of sb_S samples, loads the channel's (weight, offset) slice once and reuses
every entry across the whole group. Blocks write disjoint output regions,
so any number of workers produces bitwise-identical results.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .csr import CsrFilter
from .tensor import ConvGeometry, DenseTensor4, PrecisionMode, round_to_binary16, zero_pad

SB_CANDIDATES = (2, 4, 8)


@dataclass(frozen=True)
class ExecConfig:
    """Execution parameters: samples per virtual block and worker hint."""

    sub_batch: int = 1
    worker_count: int = 1

    def __post_init__(self):
        if self.sub_batch < 1:
            raise ValueError("sub_batch must be >= 1")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")

    def block_count(self, batch: int, out_channels: int) -> int:
        if batch % self.sub_batch:
            raise ValueError(f"sub_batch {self.sub_batch} does not divide batch {batch}")
        return (batch * out_channels) // self.sub_batch


@dataclass(frozen=True)
class VirtualBlock:
    """One output channel over a contiguous group of samples."""

    out_channel: int
    sample_start: int
    sample_count: int


def plan_blocks(geometry: ConvGeometry, batch: int, sub_batch: int) -> list[VirtualBlock]:
    """Partition (samples x output channels) into batch*D/sb_S virtual blocks."""
    if batch % sub_batch:
        raise ValueError(f"sub_batch {sub_batch} does not divide batch {batch}")
    return [
        VirtualBlock(d, g0, sub_batch)
        for d in range(geometry.out_channels)
        for g0 in range(0, batch, sub_batch)
    ]


def sparse_conv_forward(
    input: DenseTensor4, filt: CsrFilter, config: ExecConfig | None = None
) -> DenseTensor4:
    """Convolve by iterating only the stored (weight, offset) entries.

    Per output pixel (r, c) the base address inside a padded sample is
    r*s_h*(X_w + 2*w_pad) + c*s_w; each stored entry contributes
    w * x[sample_start + base + offset]. Explicit padding zeros multiply by
    zero. Matches dense_conv_reference within precision tolerance, and the
    result is bitwise-invariant to sub_batch and worker_count.
    """
    config = config or ExecConfig()
    g = filt.geometry
    g.check_input(input)
    if input.precision is not filt.precision:
        raise ValueError("input and filter precisions differ")
    n = input.n
    if n % config.sub_batch:
        raise ValueError(f"sub_batch {config.sub_batch} does not divide batch {n}")
    xflat = zero_pad(input, g).data.reshape(-1)
    out = np.zeros((n, g.out_channels, g.out_h, g.out_w), dtype=np.float32)
    blocks = plan_blocks(g, n, config.sub_batch)
    block_arr = np.array(
        [(b.out_channel, b.sample_start) for b in blocks], dtype=np.int64
    ).reshape(len(blocks), 2)
    s_h, s_w = g.stride
    args = (config.sub_batch, g.x_size, s_h, s_w, g.padded_w)
    if config.worker_count <= 1 or len(blocks) == 1:
        kernels.sparse_conv_blocks(
            xflat, filt.row_ptr, filt.col_offsets, filt.weights, out, block_arr, *args
        )
    else:
        # shared-queue pool; blocks are independent so scheduling cannot
        # change any output element
        with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
            futs = [
                pool.submit(
                    kernels.sparse_conv_blocks,
                    xflat, filt.row_ptr, filt.col_offsets, filt.weights,
                    out, block_arr[i : i + 1], *args,
                )
                for i in range(len(blocks))
            ]
            for f in futs:
                f.result()
    if input.precision is PrecisionMode.BINARY16:
        out = round_to_binary16(out)
    return DenseTensor4(out, input.precision)


def sparse_conv_1d(
    input: DenseTensor4, filt: CsrFilter, config: ExecConfig | None = None
) -> DenseTensor4:
    """sparse_conv_forward specialized to degenerate (h=1 or w=1) geometry.

    Same kernel semantics; kept as a distinct entry point because the bench
    tracks one-dimensional layers as their own class.
    """
    if input.h != 1 and input.w != 1:
        raise ValueError(f"input {input.shape} is not one-dimensional")
    return sparse_conv_forward(input, filt, config)


def time_median(fn, repeats: int = 9, warmup: int = 2) -> float:
    """Median wall time of fn() in milliseconds (monotonic clock)."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def autotune_sb(
    input: DenseTensor4,
    filt: CsrFilter,
    candidates=SB_CANDIDATES,
    worker_count: int = 1,
    repeats: int = 9,
    warmup: int = 2,
    noise_floor: float = 0.02,
) -> ExecConfig:
    """Pick the sub-batch size with the smallest median run time.

    Candidates that do not divide the batch are skipped; if none divides,
    falls back to sb_S = 1. Medians within `noise_floor` of the best are
    treated as ties and resolved toward the smaller sub-batch, which keeps
    the choice stable across runs when candidates are within measurement
    noise of each other.
    """
    n = input.n
    usable = sorted(c for c in set(candidates) if n % c == 0)
    if not usable:
        return ExecConfig(1, worker_count)
    medians = {}
    for sb in usable:
        cfg = ExecConfig(sb, worker_count)
        medians[sb] = time_median(
            lambda: sparse_conv_forward(input, filt, cfg), repeats, warmup
        )
    best = min(medians.values())
    for sb in usable:  # ascending, so the smallest near-tie wins
        if medians[sb] <= best * (1.0 + noise_floor):
            return ExecConfig(sb, worker_count)
    return ExecConfig(usable[0], worker_count)
