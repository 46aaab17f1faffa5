"""Linear fixed-point quantisation with activation saturation, and nonlinear
codebook quantisation via 1-D KMeans over layer weights.

The codebook path pins zero: clustering runs on non-zero weights only and
index 0 is reserved for exactly 0.0 whenever the layer contains zeros, so
quantisation can never densify a pruned layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .pruning import PrunedModel, apply_all_masks
from .tensor import round_to_binary16

MODES = ("passthrough", "16b/16b", "4b/16b")


@dataclass(frozen=True)
class FixedPointParams:
    """Signed fixed-point split: one sign bit, int_bits, frac_bits.

    sigma = 2**-frac_bits is the quantisation step (a pure shift). int_bits
    may be negative for small-magnitude tensors, which shifts the window
    down instead of wasting range. degenerate marks an all-zero fit.
    """

    total_bits: int
    int_bits: int
    frac_bits: int
    sigma: float
    mu: float = 0.0
    degenerate: bool = False


def fit_fixed_point(tensor, total_bits: int) -> FixedPointParams:
    """int_bits = ceil(log2(max|x|)); frac_bits = total_bits - int_bits - 1."""
    if total_bits < 2:
        raise ValueError("total_bits must be >= 2")
    arr = np.asarray(tensor)
    if arr.size == 0:
        raise ValueError("cannot fit an empty tensor")
    amax = float(np.max(np.abs(arr)))
    degenerate = amax == 0.0
    int_bits = 0 if degenerate else int(math.ceil(math.log2(amax)))
    frac_bits = total_bits - int_bits - 1
    return FixedPointParams(
        total_bits=total_bits,
        int_bits=int_bits,
        frac_bits=frac_bits,
        sigma=2.0 ** (-frac_bits),
        degenerate=degenerate,
    )


def linear_quantize(x, params: FixedPointParams):
    """q = mu + sigma * round((x - mu)/sigma), rounding half away from zero.

    In-range values land on the nearest multiple of sigma (|q - x| <=
    sigma/2); magnitudes beyond the signed range saturate at the extreme
    code. NaN propagates. Accepts scalars or arrays.
    """
    arr = np.asarray(x, dtype=np.float64)
    scaled = (arr - params.mu) / params.sigma
    codes = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    limit = float(2 ** (params.total_bits - 1) - 1)
    codes = np.clip(codes, -limit, limit)
    q = params.mu + params.sigma * codes
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(q)
    return q.astype(np.asarray(x).dtype) if np.asarray(x).dtype.kind == "f" else q


def saturate_activations(activations, quantile_threshold: float,
                         calibrated_max: float | None = None):
    """Clamp values above threshold*max(A) down to that level.

    calibrated_max substitutes a max recorded during a calibration pass;
    by default the tensor's own maximum is used.
    """
    if not 0.0 < quantile_threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    arr = np.asarray(activations)
    if arr.size == 0:
        raise ValueError("empty activation tensor")
    m = float(np.max(arr)) if calibrated_max is None else float(calibrated_max)
    cap = quantile_threshold * m
    return np.minimum(arr, cap)


@dataclass
class Codebook:
    """Shared-value weight representation: up to omega centroid values, the
    centroids reduced to psi-bit fixed point, and a per-weight index."""

    centroids: np.ndarray
    quantized_centroids: np.ndarray
    assignments: np.ndarray
    omega: int
    psi: int
    zero_pinned: bool

    def reconstruct(self, shape):
        return self.quantized_centroids[self.assignments].reshape(shape).astype(np.float32)


def _kmeans_1d(values, k, max_iter=100):
    """Lloyd iterations with deterministic quantile seeding over the unique
    values; converges when assignments stop changing. Returns (centroids,
    assignments) with centroids in seeding order."""
    uniq = np.unique(values)
    k = min(k, uniq.size)
    seeds = uniq[np.minimum((np.arange(k) + 0.5) / k * uniq.size, uniq.size - 1).astype(int)]
    centroids = seeds.astype(np.float64)
    assign = None
    for _ in range(max_iter):
        dist = np.abs(values[:, None] - centroids[None, :])
        new_assign = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = values[assign == j]
            if sel.size:
                centroids[j] = sel.mean()
    return centroids, assign


def kmeans_codebook(weights, omega: int, psi: int = 16) -> Codebook:
    """Cluster a layer's weights into omega shared values (Lloyd, 1-D).

    Zeros never enter the clustering; when present they map to a dedicated
    zero centroid at index 0 and the non-zero weights get omega-1 clusters,
    keeping the codebook size at most omega. Centroids are then reduced to
    psi-bit fixed point. Shrinks when there are fewer distinct non-zero
    values than clusters.
    """
    if omega < 1:
        raise ValueError("omega must be >= 1")
    if psi not in (8, 16):
        raise ValueError("psi must be 8 or 16")
    flat = np.asarray(weights, dtype=np.float64).ravel()
    nz = flat[flat != 0]
    zero_pinned = nz.size < flat.size
    budget = omega - 1 if zero_pinned else omega
    if budget < 1:
        raise ValueError("omega too small to pin zero and keep a cluster")

    if nz.size == 0:
        centroids = np.array([0.0])
        assignments = np.zeros(flat.size, dtype=np.int64)
    else:
        nz_centroids, nz_assign = _kmeans_1d(nz, budget)
        if zero_pinned:
            centroids = np.concatenate([[0.0], nz_centroids])
            assignments = np.zeros(flat.size, dtype=np.int64)
            assignments[flat != 0] = nz_assign + 1
        else:
            centroids = nz_centroids
            assignments = nz_assign.astype(np.int64)

    params = fit_fixed_point(centroids, psi)
    quantized = np.asarray(
        [linear_quantize(float(c), params) for c in centroids], dtype=np.float64
    )
    if zero_pinned:
        quantized[0] = 0.0  # exact zero survives the reduction
    return Codebook(
        centroids=centroids,
        quantized_centroids=quantized,
        assignments=assignments,
        omega=omega,
        psi=psi,
        zero_pinned=zero_pinned,
    )


def kmeans_cost(values, centroids, assignments) -> float:
    d = values - centroids[assignments]
    return float(np.sum(d * d))


def save_codebook(cb: Codebook, path) -> None:
    """JSON description plus a .bin with one byte per weight (omega <= 256)."""
    if len(cb.centroids) > 256:
        raise ValueError("assignment export supports at most 256 centroids")
    meta = {
        "omega": cb.omega,
        "psi": cb.psi,
        "zero_pinned": cb.zero_pinned,
        "centroids": [float(c) for c in cb.centroids],
        "quantized_centroids": [float(c) for c in cb.quantized_centroids],
        "weight_count": int(cb.assignments.size),
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    cb.assignments.astype(np.uint8).tofile(str(path) + ".bin")


def load_codebook(path) -> Codebook:
    with open(path) as fh:
        meta = json.load(fh)
    assignments = np.fromfile(str(path) + ".bin", dtype=np.uint8).astype(np.int64)
    if assignments.size != meta["weight_count"]:
        raise ValueError("assignment array length mismatch")
    return Codebook(
        centroids=np.asarray(meta["centroids"]),
        quantized_centroids=np.asarray(meta["quantized_centroids"]),
        assignments=assignments,
        omega=meta["omega"],
        psi=meta["psi"],
        zero_pinned=meta["zero_pinned"],
    )


# ---------------------------------------------------------------------------
# whole-model quantisation

def calibrate_activation_maxima(model: nn.Model, X_val, batch_size=64):
    """Per-layer activation maxima over one validation pass."""
    maxima = {}

    def hook(i, a):
        m = float(a.max()) if a.size else 0.0
        maxima[i] = max(maxima.get(i, -np.inf), m)
        return a

    for start in range(0, X_val.shape[0], batch_size):
        model.forward(X_val[start : start + batch_size], act_hook=hook)
    return maxima


def _half_hook(saturation=None, maxima=None):
    def hook(i, a):
        if saturation is not None and maxima is not None and i in maxima:
            a = saturate_activations(a, saturation, calibrated_max=maxima[i])
        return round_to_binary16(a).astype(a.dtype)

    return hook


@dataclass
class QuantizedModel:
    """A quantised copy of a pruned model plus its activation hook."""

    model: nn.Model
    mode: str
    act_hook: object = None
    codebooks: dict = None


def quantize_model(pruned: PrunedModel, mode: str, calibration=None,
                   omega: int = 16, psi: int = 16,
                   saturation: float = 0.99) -> QuantizedModel:
    """Quantise a pruned model.

    passthrough: binary32 copy, bitwise identical outputs.
    16b/16b: weights rounded to binary16; every activation rounds to
      binary16 after each layer (sums still accumulate in binary32).
    4b/16b: weights shared across omega centroids per prunable layer
      (codebook, psi-bit centroids); activations binary16 with saturation
      at `saturation` * the calibrated per-layer maximum. `calibration`
      supplies the inputs for the calibration pass.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    model = pruned.model.copy()
    if mode == "passthrough":
        return QuantizedModel(model, mode)

    codebooks = None
    if mode == "4b/16b":
        codebooks = {}
        for i in pruned.masks:
            layer = model.layers[i]
            cb = kmeans_codebook(layer.w, omega, psi)
            codebooks[i] = cb
            layer.w[...] = cb.reconstruct(layer.w.shape)
        for i, layer in enumerate(model.layers):
            for name, p in layer.params().items():
                if name != "w" or i not in pruned.masks:
                    p[...] = round_to_binary16(p)
        if calibration is None:
            raise ValueError("4b/16b needs calibration inputs")
        maxima = calibrate_activation_maxima(model, calibration)
        hook = _half_hook(saturation, maxima)
    else:  # 16b/16b
        for layer in model.layers:
            for p in layer.params().values():
                p[...] = round_to_binary16(p)
        hook = _half_hook()

    qm = QuantizedModel(model, mode, act_hook=hook, codebooks=codebooks)
    # masked positions must still be exactly zero
    apply_all_masks(PrunedModel(model, pruned.masks))
    return qm
