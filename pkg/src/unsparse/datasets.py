"""Desk-scale datasets: synthetic Gaussian-blob images for classification,
sinusoid sequences with injected anomalies for 1D reconstruction, and a
loader for small external image sets in a raw binary format.

Raw binary dataset layout (little-endian), documented byte-exactly:
  u32 sample count n
  u32 channels c, u32 height h, u32 width w
  n*c*h*w float32 sample values (sample-major, then NCHW order)
  n u16 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    """Disjoint train/validation/test splits of (inputs, labels)."""

    train: tuple
    val: tuple
    test: tuple
    meta: dict = field(default_factory=dict)


def save_raw_dataset(path, X, labels) -> None:
    X = np.ascontiguousarray(X, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.uint16)
    if X.ndim != 4 or labels.shape != (X.shape[0],):
        raise ValueError("expected NCHW samples and one u16 label per sample")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *X.shape))
        fh.write(X.astype("<f4").tobytes())
        fh.write(labels.astype("<u2").tobytes())


def load_raw_dataset(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise ValueError(f"{path}: truncated dataset header")
        n, c, h, w = struct.unpack("<4I", head)
        body = fh.read()
    need = n * c * h * w * 4 + n * 2
    if len(body) != need:
        raise ValueError(f"{path}: expected {need} payload bytes, got {len(body)}")
    X = np.frombuffer(body, dtype="<f4", count=n * c * h * w).astype(np.float32)
    labels = np.frombuffer(body, dtype="<u2", offset=n * c * h * w * 4).astype(np.int64)
    return X.reshape(n, c, h, w), labels


def _blob(h, w, cy, cx, sy, sx):
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return np.exp(-(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2))


def _synthetic_images(proto_rng, rng, n, classes, size, noise):
    """Each class is a fixed pair of Gaussian blobs; samples add noise.

    proto_rng seeds the class prototypes and must be shared across splits;
    rng drives the per-sample jitter and noise.
    """
    protos = []
    for _ in range(classes):
        blobs = []
        for _ in range(2):
            blobs.append((
                proto_rng.uniform(2, size - 3), proto_rng.uniform(2, size - 3),
                proto_rng.uniform(1.2, 2.8), proto_rng.uniform(1.2, 2.8),
                proto_rng.uniform(0.7, 1.3),
            ))
        protos.append(blobs)
    X = np.empty((n, 1, size, size), np.float32)
    y = rng.integers(0, classes, size=n)
    for i in range(n):
        img = np.zeros((size, size))
        for cy, cx, sy, sx, amp in protos[y[i]]:
            jy, jx = rng.uniform(-0.7, 0.7, size=2)
            img += amp * _blob(size, size, cy + jy, cx + jx, sy, sx)
        img += noise * rng.standard_normal((size, size))
        X[i, 0] = img
    return X, y.astype(np.int64)


def _synthetic_1d(proto_rng, rng, n, channels, length, anomaly_rate, spike_amp):
    """Multichannel sinusoids; anomalous samples get a spike burst injected
    into a few random channels. Labels: 1 = anomalous.

    proto_rng fixes the per-channel frequency/phase/amplitude profile shared
    by every split; rng drives sample noise and anomaly placement.
    """
    t = np.arange(length) / length
    freqs = proto_rng.uniform(2.0, 6.0, size=channels)
    phases = proto_rng.uniform(0, 2 * np.pi, size=channels)
    amps = proto_rng.uniform(0.6, 1.2, size=channels)
    X = np.empty((n, channels, length, 1), np.float32)
    y = (rng.random(n) < anomaly_rate).astype(np.int64)
    for i in range(n):
        # per-sample global phase shift keeps reconstruction non-trivial
        shift = rng.uniform(-0.6, 0.6)
        sig = amps[:, None] * np.sin(
            2 * np.pi * freqs[:, None] * t + phases[:, None] + shift
        )
        sig = sig + 0.08 * rng.standard_normal((channels, length))
        if y[i]:
            start = int(rng.integers(0, length - 30))
            chans = rng.choice(channels, size=8, replace=False)
            burst = spike_amp * rng.standard_normal((8, 30))
            sig[chans, start : start + 30] += burst
        X[i, :, :, 0] = sig
    return X, y


def make_datasets(spec: dict) -> Dataset:
    """Build deterministic splits from a dataset spec dict.

    spec["name"] is one of synthetic-images, synthetic-1d, tiny-image-subset.
    Split sizes come from n_train/n_val/n_test (n_val defaults to 10% of
    n_train). Each split draws from its own seeded substream, so splits are
    disjoint by construction and stable across runs.
    """
    name = spec["name"]
    seed = int(spec.get("seed", 0))
    n_train = int(spec.get("n_train", 512))
    n_val = int(spec.get("n_val", max(1, n_train // 10)))
    n_test = int(spec.get("n_test", 128))
    sizes = {"train": n_train, "val": n_val, "test": n_test}

    if name == "synthetic-images":
        classes = int(spec.get("classes", 8))
        size = int(spec.get("size", 12))
        noise = float(spec.get("noise", 0.25))
        splits = {}
        for si, (split, count) in enumerate(sizes.items()):
            proto_rng = np.random.default_rng([seed, 101])
            rng = np.random.default_rng([seed, 101, si])
            splits[split] = _synthetic_images(proto_rng, rng, count, classes,
                                              size, noise)
        meta = {"task": "classification", "classes": classes,
                "in_shape": (1, size, size)}
    elif name == "synthetic-1d":
        channels = int(spec.get("channels", 64))
        length = int(spec.get("length", 300))
        rate = float(spec.get("anomaly_rate", 0.05))
        spike = float(spec.get("spike_amp", 6.0))
        splits = {}
        for si, (split, count) in enumerate(sizes.items()):
            proto_rng = np.random.default_rng([seed, 202])
            rng = np.random.default_rng([seed, 202, si])
            splits[split] = _synthetic_1d(proto_rng, rng, count, channels,
                                          length, rate, spike)
        meta = {"task": "anomaly", "in_shape": (channels, length, 1),
                "anomaly_rate": rate}
    elif name == "tiny-image-subset":
        X, y = load_raw_dataset(spec["path"])
        rng = np.random.default_rng([seed, 303])
        order = rng.permutation(X.shape[0])
        if n_train + n_val + n_test > X.shape[0]:
            raise ValueError("split sizes exceed dataset size")
        a, b = n_train, n_train + n_val
        splits = {
            "train": (X[order[:a]], y[order[:a]]),
            "val": (X[order[a:b]], y[order[a:b]]),
            "test": (X[order[b : b + n_test]], y[order[b : b + n_test]]),
        }
        meta = {"task": "classification", "classes": int(y.max()) + 1,
                "in_shape": X.shape[1:]}
    else:
        raise ValueError(f"unknown dataset {name!r}")

    return Dataset(splits["train"], splits["val"], splits["test"], meta)
