"""Per-layer sparse-vs-dense timing harness.

Every row times the sparse engine (after sub-batch autotuning) against the
package's own dense reference on the same masked weights, so speedups are
engine-relative. Medians of >= 9 runs after warmup, monotonic clock.
"""

from __future__ import annotations

import csv
import io
import os
import platform
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .csr import build_csr
from .engine import ExecConfig, autotune_sb, sparse_conv_forward, time_median
from .tensor import ConvGeometry, DenseTensor4, PrecisionMode, dense_conv_reference

# layer shape presets; 2D shapes follow the 512x512-class and 1x1-class
# layers the sweep targets, 1D shapes the length-300 64-channel layer
PRESETS = {
    "vgg16-512x14": dict(in_channels=512, out_channels=512, filter_h=3, filter_w=3,
                         input_h=14, input_w=14, padding=(1, 1)),
    "vgg16-512x28": dict(in_channels=512, out_channels=512, filter_h=3, filter_w=3,
                         input_h=28, input_w=28, padding=(1, 1)),
    "resnet50-1x1-64x256": dict(in_channels=64, out_channels=256, filter_h=1,
                                filter_w=1, input_h=14, input_w=14),
    "resnet50-1x1-256x64": dict(in_channels=256, out_channels=64, filter_h=1,
                                filter_w=1, input_h=14, input_w=14),
    "cnn1d-300x64-k2": dict(in_channels=64, out_channels=64, filter_h=2,
                            filter_w=1, input_h=300, input_w=1),
    "cnn1d-300x64-k3": dict(in_channels=64, out_channels=64, filter_h=3,
                            filter_w=1, input_h=300, input_w=1),
    "toy-16x12": dict(in_channels=16, out_channels=16, filter_h=3, filter_w=3,
                      input_h=12, input_w=12, padding=(1, 1)),
}

CSV_HEADER = [
    "layer_id", "preset", "in_channels", "out_channels", "filter_h", "filter_w",
    "input_h", "input_w", "stride_h", "stride_w", "pad_h", "pad_w", "batch",
    "sparsity_pct", "precision", "sb_s", "sparse_ms", "dense_ms", "speedup",
]


@dataclass
class BenchRow:
    layer_id: str
    preset: str
    in_channels: int
    out_channels: int
    filter_h: int
    filter_w: int
    input_h: int
    input_w: int
    stride_h: int
    stride_w: int
    pad_h: int
    pad_w: int
    batch: int
    sparsity_pct: float
    precision: str
    sb_s: int
    sparse_ms: float
    dense_ms: float
    speedup: float


@dataclass
class BenchReport:
    rows: list
    environment: dict


def preset_geometry(name: str) -> ConvGeometry:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return ConvGeometry(**PRESETS[name])


def synthesize_masked_weights(geometry: ConvGeometry, sparsity: float, rng,
                              precision=PrecisionMode.BINARY32) -> DenseTensor4:
    """Random filter with exactly floor(sparsity*size) zeros."""
    shape = (geometry.out_channels, geometry.in_channels,
             geometry.filter_h, geometry.filter_w)
    w = rng.standard_normal(shape).astype(np.float32)
    size = w.size
    k = int(np.floor(sparsity * size))
    if k:
        flat = w.reshape(-1)
        flat[rng.choice(size, size=k, replace=False)] = 0.0
    return DenseTensor4.from_array(w, precision)


def bench_layer(name: str, geometry: ConvGeometry, sparsity: float,
                precision: PrecisionMode, batch: int, rng,
                workers: int = 1, repeats: int = 9, warmup: int = 2) -> BenchRow:
    weights = synthesize_masked_weights(geometry, sparsity, rng, precision)
    x = DenseTensor4.from_array(
        rng.standard_normal(
            (batch, geometry.in_channels, geometry.input_h, geometry.input_w)
        ).astype(np.float32),
        precision,
    )
    filt = build_csr(weights, geometry)
    cfg = autotune_sb(x, filt, worker_count=workers,
                      repeats=max(3, repeats // 2), warmup=warmup)
    sparse_ms = time_median(
        lambda: sparse_conv_forward(x, filt, cfg), repeats, warmup
    )
    dense_ms = time_median(
        lambda: dense_conv_reference(x, weights, geometry, workers=workers),
        repeats, warmup,
    )
    sparsity_pct = round(100.0 * sparsity, 4)
    layer_id = f"{name}@{sparsity_pct:g}%/{precision.tag}"
    return BenchRow(
        layer_id=layer_id, preset=name,
        in_channels=geometry.in_channels, out_channels=geometry.out_channels,
        filter_h=geometry.filter_h, filter_w=geometry.filter_w,
        input_h=geometry.input_h, input_w=geometry.input_w,
        stride_h=geometry.stride[0], stride_w=geometry.stride[1],
        pad_h=geometry.padding[0], pad_w=geometry.padding[1],
        batch=batch, sparsity_pct=sparsity_pct, precision=precision.tag,
        sb_s=cfg.sub_batch, sparse_ms=sparse_ms, dense_ms=dense_ms,
        speedup=dense_ms / sparse_ms if sparse_ms else float("inf"),
    )


def environment_info(workers: int, repeats: int) -> dict:
    return {
        "cpu": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "platform": platform.platform(),
        "workers": workers,
        "repetitions": repeats,
    }


def run_bench(bench_cfg: dict, seed: int = 0, workers: int = 1) -> BenchReport:
    """Sweep (layer preset x sparsity x precision) per the bench config."""
    names = bench_cfg.get("layers", ["cnn1d-300x64-k2"])
    sparsities = bench_cfg.get("sparsities", [0.77, 0.83, 0.875])
    precisions = [
        PrecisionMode.BINARY16 if p in ("binary16", "binary16-emulated", "half")
        else PrecisionMode.BINARY32
        for p in bench_cfg.get("precisions", ["binary32"])
    ]
    batch = int(bench_cfg.get("batch", 8))
    repeats = int(bench_cfg.get("repeats", 9))
    warmup = int(bench_cfg.get("warmup", 2))
    rows = []
    for name in names:
        geometry = preset_geometry(name)
        for precision in precisions:
            for s in sparsities:
                rng = np.random.default_rng([seed, zlib.crc32(name.encode()),
                                             int(round(s * 1000))])
                rows.append(
                    bench_layer(name, geometry, float(s), precision, batch, rng,
                                workers, repeats, warmup)
                )
    return BenchReport(rows, environment_info(workers, repeats))


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(asdict(row))
    return buf.getvalue()


def rows_from_csv(text: str) -> list[BenchRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise ValueError(f"unexpected bench CSV header: {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(BenchRow(
            layer_id=rec["layer_id"], preset=rec["preset"],
            in_channels=int(rec["in_channels"]), out_channels=int(rec["out_channels"]),
            filter_h=int(rec["filter_h"]), filter_w=int(rec["filter_w"]),
            input_h=int(rec["input_h"]), input_w=int(rec["input_w"]),
            stride_h=int(rec["stride_h"]), stride_w=int(rec["stride_w"]),
            pad_h=int(rec["pad_h"]), pad_w=int(rec["pad_w"]),
            batch=int(rec["batch"]), sparsity_pct=float(rec["sparsity_pct"]),
            precision=rec["precision"], sb_s=int(rec["sb_s"]),
            sparse_ms=float(rec["sparse_ms"]), dense_ms=float(rec["dense_ms"]),
            speedup=float(rec["speedup"]),
        ))
    return rows


def rows_to_markdown(rows) -> str:
    lines = [
        "| layer | sparsity % | precision | sb_S | sparse ms | dense ms | speedup |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.layer_id} | {r.sparsity_pct:g} | {r.precision} | {r.sb_s} "
            f"| {r.sparse_ms:.3f} | {r.dense_ms:.3f} | {r.speedup:.2f} |"
        )
    return "\n".join(lines) + "\n"


def backend_config(rows, expected_layers=None) -> dict:
    """Row-wise argmin of the two medians; exact ties choose dense."""
    if expected_layers:
        have = {r.layer_id for r in rows}
        missing = [l for l in expected_layers if l not in have]
        if missing:
            raise ValueError(f"bench report is missing layers: {missing}")
    cfg = {}
    for r in rows:
        sparse_wins = r.sparse_ms < r.dense_ms
        cfg[r.layer_id] = {
            "backend": "sparse" if sparse_wins else "dense",
            "time_ms": r.sparse_ms if sparse_wins else r.dense_ms,
            "sb_s": r.sb_s,
        }
    return cfg


def spearman_rho(xs, ys) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            sel = v == val
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom else 0.0
