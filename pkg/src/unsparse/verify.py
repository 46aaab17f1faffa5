"""Self-contained oracle suite behind `unsparse verify`.

Each check re-derives its expectation independently of the code path it
exercises: the sparse engine is compared against the dense reference, CSR
roundtrips against the original tensors, the quantizer against its error
bound, gradients against central finite differences. A deliberately
corrupted CSR payload must be rejected.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .csr import CsrCorruptionError, CsrFilter, build_csr, csr_to_dense
from .engine import ExecConfig, sparse_conv_forward
from .quantization import fit_fixed_point, linear_quantize
from .tensor import ConvGeometry, DenseTensor4, PrecisionMode, dense_conv_reference

KERNELS = [(1, 1), (3, 3), (3, 1), (2, 1)]


def random_case(rng, precision=PrecisionMode.BINARY32):
    kh, kw = KERNELS[rng.integers(len(KERNELS))]
    c = int(rng.integers(1, 17))
    d = int(rng.integers(1, 17))
    s_h = int(rng.integers(1, 3))
    s_w = int(rng.integers(1, 3))
    h_pad = int(rng.integers(0, 2))
    w_pad = int(rng.integers(0, 2)) if kw > 1 else 0
    # sample output dims first so strides always divide
    y_h = int(rng.integers(1, 7))
    y_w = int(rng.integers(1, 7)) if kw > 1 else 1
    x_h = (y_h - 1) * s_h + kh - 2 * h_pad
    x_w = (y_w - 1) * s_w + kw - 2 * w_pad
    if x_h < 1 or x_w < 1:
        h_pad = w_pad = 0
        x_h = (y_h - 1) * s_h + kh
        x_w = (y_w - 1) * s_w + kw
    geometry = ConvGeometry(c, d, kh, kw, x_h, x_w, (s_h, s_w), (h_pad, w_pad))
    batch = int(2 ** rng.integers(0, 4))
    sparsity = float(rng.uniform(0.0, 0.99))
    w = rng.standard_normal((d, c, kh, kw)).astype(np.float32)
    kz = int(np.floor(sparsity * w.size))
    if kz:
        w.reshape(-1)[rng.choice(w.size, kz, replace=False)] = 0.0
    x = rng.standard_normal((batch, c, x_h, x_w)).astype(np.float32)
    weights = DenseTensor4.from_array(w, precision)
    inp = DenseTensor4.from_array(x, precision)
    sbs = [s for s in (1, 2, 4, 8) if batch % s == 0]
    sb = int(sbs[rng.integers(len(sbs))])
    return inp, weights, geometry, ExecConfig(sb)


def check_oracle_equivalence(seed, cases=200, tol32=1e-5, tol16=2e-2):
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for i in range(cases):
        precision = PrecisionMode.BINARY16 if i % 4 == 3 else PrecisionMode.BINARY32
        tol = tol16 if precision is PrecisionMode.BINARY16 else tol32
        inp, weights, geometry, cfg = random_case(rng, precision)
        ref = dense_conv_reference(inp, weights, geometry).data
        got = sparse_conv_forward(inp, build_csr(weights, geometry), cfg).data
        err = float(np.max(np.abs(got - ref) / (1.0 + np.abs(ref))))
        rel = err / tol
        worst = max(worst, rel)
        if rel > 1.0:
            return False, f"case {i}: rel err {err:.2e} over tolerance"
    return True, f"{cases} cases, worst err/tol {worst:.3f}"


def check_csr_roundtrip(seed, cases=100):
    rng = np.random.default_rng([seed, 2])
    for i in range(cases):
        _, weights, geometry, _ = random_case(rng)
        filt = build_csr(weights, geometry)
        if not np.all(np.diff(filt.row_ptr) == filt.n_nz):
            return False, f"case {i}: non-uniform row_ptr"
        back = csr_to_dense(filt)
        if not np.array_equal(back.data, weights.data):
            return False, f"case {i}: roundtrip mismatch"
    return True, f"{cases} filters bit-exact"


def check_csr_corruption_detected(seed):
    rng = np.random.default_rng([seed, 3])
    geometry = ConvGeometry(2, 2, 3, 3, 6, 6)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    filt = build_csr(DenseTensor4.from_array(w), geometry)
    bad = filt.col_offsets.copy()
    bad[-1] = geometry.x_size + 5  # outside the padded sample
    try:
        CsrFilter(filt.row_ptr, bad, filt.weights, filt.n_nz, geometry)
    except CsrCorruptionError:
        return True, "corrupted offset rejected"
    return False, "corrupted offset accepted"


def check_quantizer_bound(seed, points=10000):
    rng = np.random.default_rng([seed, 4])
    data = rng.uniform(-3.0, 3.0, size=257)
    params = fit_fixed_point(data, 8)
    limit = (2 ** (params.total_bits - 1) - 1) * params.sigma
    grid = np.linspace(-limit, limit, points)
    q = linear_quantize(grid, params)
    err = np.max(np.abs(q - grid))
    ok = err <= params.sigma / 2 + 1e-12
    return ok, f"max err {err:.3e} vs sigma/2 {params.sigma / 2:.3e}"


def check_gradients(seed, tol=1e-3):
    rng = np.random.default_rng([seed, 5])
    specs = nn.toy_classifier_specs((1, 8, 8), 3)
    model = nn.build_model(specs, "softmax-xent", rng, dtype=np.float64)
    x = rng.standard_normal((4, 1, 8, 8))
    y = rng.integers(0, 3, size=4)
    _, grads = nn.backward(model, (x, y))
    eps = 1e-4
    worst = 0.0
    for i in model.prunable_indices():
        w = model.layers[i].w
        flat = w.reshape(-1)
        for j in rng.choice(flat.size, size=min(20, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + eps
            lp, _ = nn.forward(model, (x, y))
            flat[j] = orig - eps
            lm, _ = nn.forward(model, (x, y))
            flat[j] = orig
            fd = (lp - lm) / (2 * eps)
            an = grads[i]["w"].reshape(-1)[j]
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, err)
            if err > tol and abs(an - fd) > 1e-7:
                return False, f"layer {i} idx {j}: analytic {an:.6g} fd {fd:.6g}"
    return True, f"worst rel err {worst:.2e}"


def check_determinism(seed):
    rng = np.random.default_rng([seed, 6])
    inp, weights, geometry, _ = random_case(rng)
    filt = build_csr(weights, geometry)
    outs = []
    for sb in (1, 2, 4, 8):
        if inp.n % sb:
            continue
        for workers in (1, 3):
            outs.append(sparse_conv_forward(inp, filt, ExecConfig(sb, workers)).data)
    same = all(np.array_equal(outs[0], o) for o in outs[1:])
    return same, f"{len(outs)} schedules bitwise identical"


def run_all_checks(seed: int = 0):
    checks = [
        ("sparse-vs-dense oracle", check_oracle_equivalence),
        ("csr roundtrip", check_csr_roundtrip),
        ("csr corruption detection", check_csr_corruption_detected),
        ("linear quantizer bound", check_quantizer_bound),
        ("gradient finite differences", check_gradients),
        ("schedule determinism", check_determinism),
    ]
    results = []
    for name, fn in checks:
        try:
            passed, detail = fn(seed)
        except Exception as exc:  # a crash is a failure, not an abort
            passed, detail = False, f"exception: {exc!r}"
        results.append((name, passed, detail))
    return results
