"""Pipeline orchestration: prune -> quantize -> bench -> configure -> verify.

Checkpoints are directories: a JSON manifest (hyperparameters, per-layer
sparsity, accuracy history, RNG state) plus binary blobs for weights,
bit-packed masks, gradient statistics and the ranked-list entries. Resuming
restores the exact loop state, so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import nn
from .datasets import Dataset, make_datasets
from .pruning import (
    PruneHyper, PruneState, PrunedModel, RankedEntry, RankedList,
    apply_all_masks, best_pruned, init_prune_state, layer_sparsity, run_prune,
    weighted_sparsity,
)
from .quantization import quantize_model, save_codebook

CHECKPOINT_FORMAT = "unsparse-checkpoint-v1"


# ---------------------------------------------------------------------------
# config

def load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    return apply_env_overrides(cfg)


def apply_env_overrides(cfg: dict, environ=None) -> dict:
    """UNSPARSE_<SECTION>__<KEY>=<json value> overrides config entries."""
    environ = os.environ if environ is None else environ
    for key, raw in environ.items():
        if not key.startswith("UNSPARSE_") or "__" not in key:
            continue
        section, _, name = key[len("UNSPARSE_"):].partition("__")
        section, name = section.lower(), name.lower()
        if not name:
            continue
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg.setdefault(section, {})[name] = value
    return cfg


def build_model_from_config(model_cfg: dict, data_meta: dict, rng,
                            dtype=np.float32) -> nn.Model:
    kind = model_cfg.get("kind")
    if kind is None:
        kind = "toy-classifier" if data_meta["task"] == "classification" \
            else "autoencoder-1d"
    if kind == "toy-classifier":
        specs = nn.toy_classifier_specs(
            tuple(data_meta["in_shape"]), data_meta["classes"]
        )
        return nn.build_model(specs, "softmax-xent", rng, dtype)
    if kind == "autoencoder-1d":
        c, length, _ = data_meta["in_shape"]
        specs = nn.autoencoder_1d_specs(c, length)
        return nn.build_model(specs, "mse", rng, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoint io

def _param_order(model: nn.Model):
    return sorted(
        (i, name)
        for i, layer in enumerate(model.layers)
        for name in layer.params()
    )


def _weights_blob(weights: dict, order) -> bytes:
    return b"".join(
        np.ascontiguousarray(weights[key], np.float32).astype("<f4").tobytes()
        for key in order
    )


def _masks_blob(masks: dict, mask_order) -> bytes:
    return b"".join(
        np.packbits(masks[i].ravel().astype(np.uint8)).tobytes()
        for i in mask_order
    )


def _grads_blob(grads: dict, mask_order) -> bytes:
    return b"".join(
        np.ascontiguousarray(grads[i], np.float32).astype("<f4").tobytes()
        for i in mask_order
    )


def _read_weights(blob: bytes, order, shapes, offset=0):
    out = {}
    for key in order:
        shape = shapes[key]
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        out[key] = arr.astype(np.float32).reshape(shape)
        offset += 4 * count
    return out, offset

def _read_masks(blob: bytes, mask_order, shapes, offset=0):
    out = {}
    for i in mask_order:
        shape = shapes[i]
        size = int(np.prod(shape))
        nbytes = (size + 7) // 8
        packed = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=offset)
        out[i] = np.unpackbits(packed, count=size).reshape(shape)
        offset += nbytes
    return out, offset


def save_checkpoint(path, state: PruneState, hyper: PruneHyper, config: dict,
                    task: str) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model = state.pruned.model
    order = _param_order(model)
    mask_order = sorted(state.pruned.masks)

    (path / "weights.bin").write_bytes(_weights_blob(model.snapshot(), order))
    (path / "masks.bin").write_bytes(_masks_blob(state.pruned.masks, mask_order))
    (path / "grads.bin").write_bytes(_grads_blob(state.pruned.grad_stats, mask_order))
    ranked_blob = b"".join(
        _weights_blob(e.weights, order)
        + _masks_blob(e.masks, mask_order)
        + _grads_blob(e.grad_stats, mask_order)
        for e in state.ranked.entries
    )
    (path / "ranked.bin").write_bytes(ranked_blob)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "task": task,
        "hyper": {k: getattr(hyper, k) for k in hyper.__dataclass_fields__},
        "iteration": state.iteration,
        "acc_prev": state.acc_prev,
        "accuracy": state.pruned.accuracy,
        "optimizer": list(state.pruned.optimizer),
        "delta": {str(i): state.delta[i] for i in mask_order},
        "sparsity": {str(i): state.sparsity[i] for i in mask_order},
        "layer_sparsity": {
            str(i): layer_sparsity(state.pruned.masks[i]) for i in mask_order
        },
        "weighted_sparsity": weighted_sparsity(state.pruned),
        "history": state.history,
        "sensitivity_log": {
            str(i): v for i, v in sorted(state.sensitivity_log.items())
        },
        "rng_state": state.rng.bit_generator.state,
        "ranked": [
            {"accuracy": e.accuracy,
             "layer_sparsity": {str(i): e.layer_sparsity[i] for i in mask_order}}
            for e in state.ranked.entries
        ],
        "param_index": [[i, name, list(model.layers[i].params()[name].shape)]
                        for i, name in order],
        "mask_index": [[i, list(state.pruned.masks[i].shape)] for i in mask_order],
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Rebuild the full loop state; returns (state, hyper, config, task)."""
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    config = manifest["config"]
    task = manifest["task"]
    hyper = PruneHyper(**manifest["hyper"])

    data_meta = _dataset_meta(config)
    model = build_model_from_config(
        config.get("model", {}), data_meta, np.random.default_rng(0)
    )
    order = [(i, name) for i, name, _ in manifest["param_index"]]
    shapes = {(i, name): tuple(s) for i, name, s in manifest["param_index"]}
    mask_order = [i for i, _ in manifest["mask_index"]]
    mask_shapes = {i: tuple(s) for i, s in manifest["mask_index"]}

    weights, _ = _read_weights((path / "weights.bin").read_bytes(), order, shapes)
    model.load_snapshot(weights)
    masks, _ = _read_masks((path / "masks.bin").read_bytes(), mask_order, mask_shapes)
    grads, _ = _read_weights(
        (path / "grads.bin").read_bytes(),
        [(i, "w") for i in mask_order],
        {(i, "w"): mask_shapes[i] for i in mask_order},
    )
    grads = {i: grads[(i, "w")] for i in mask_order}

    pruned = PrunedModel(
        model=model,
        masks=masks,
        optimizer=tuple(manifest["optimizer"]),
        grad_stats=grads,
        accuracy=manifest["accuracy"],
    )
    ranked = RankedList(hyper.ranked_len)
    blob = (path / "ranked.bin").read_bytes()
    offset = 0
    for meta in manifest["ranked"]:
        w, offset = _read_weights(blob, order, shapes, offset)
        m, offset = _read_masks(blob, mask_order, mask_shapes, offset)
        g, offset = _read_weights(
            blob, [(i, "w") for i in mask_order],
            {(i, "w"): mask_shapes[i] for i in mask_order}, offset,
        )
        ranked.entries.append(RankedEntry(
            weights=w, masks=m, grad_stats={i: g[(i, "w")] for i in mask_order},
            accuracy=meta["accuracy"],
            layer_sparsity={int(i): v for i, v in meta["layer_sparsity"].items()},
        ))

    rng = np.random.default_rng(0)
    rng.bit_generator.state = manifest["rng_state"]
    state = PruneState(
        pruned=pruned,
        delta={int(i): v for i, v in manifest["delta"].items()},
        sparsity={int(i): v for i, v in manifest["sparsity"].items()},
        ranked=ranked,
        acc_prev=manifest["acc_prev"],
        iteration=manifest["iteration"],
        rng=rng,
        history=manifest["history"],
        sensitivity_log={
            int(i): [tuple(x) for x in v]
            for i, v in manifest["sensitivity_log"].items()
        },
    )
    return state, hyper, config, task


def _dataset_meta(config: dict) -> dict:
    # meta is derivable without materializing the data for synthetic sets
    ds = config["dataset"]
    name = ds["name"]
    if name == "synthetic-images":
        size = int(ds.get("size", 12))
        return {"task": "classification", "classes": int(ds.get("classes", 8)),
                "in_shape": (1, size, size)}
    if name == "synthetic-1d":
        return {"task": "anomaly",
                "in_shape": (int(ds.get("channels", 64)),
                             int(ds.get("length", 300)), 1)}
    return make_datasets(ds).meta


# ---------------------------------------------------------------------------
# commands

def history_csv(history) -> str:
    lines = ["iteration,action,layers,loss,accuracy,sensitivity,weighted_sparsity"]
    for h in history:
        layers = ";".join(str(i) for i in h["layers"])
        lines.append(
            f'{h["iteration"]},{h["action"]},{layers},{h["loss"]!r},'
            f'{h["accuracy"]!r},{h["sensitivity"]!r},{h["weighted_sparsity"]!r}'
        )
    return "\n".join(lines) + "\n"


def cmd_prune(config: dict, seed: int = 0, out_dir="out", resume=None):
    """Run (or resume) the pruning loop; writes checkpoint + history CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume:
        state, hyper, config, task = load_checkpoint(resume)
        data = make_datasets(_with_seed(config["dataset"], seed))
    else:
        hyper = PruneHyper(**config.get("prune", {}))
        data = make_datasets(_with_seed(config["dataset"], seed))
        task = data.meta["task"]
        rng = np.random.default_rng(seed)
        model = build_model_from_config(config.get("model", {}), data.meta, rng)
        state = init_prune_state(model, data, hyper, rng, task)
    remaining = max(0, hyper.n_it - state.iteration)
    run_prune(state, data, hyper, remaining, task)
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, state, hyper, config, task)
    (out / "prune_history.csv").write_text(history_csv(state.history))
    best = best_pruned(state, hyper, task)
    return {
        "checkpoint": str(ckpt),
        "history_csv": str(out / "prune_history.csv"),
        "weighted_sparsity": weighted_sparsity(best),
        "accuracy": best.accuracy,
        "iterations": state.iteration,
    }


def _with_seed(dataset_cfg: dict, seed: int) -> dict:
    ds = dict(dataset_cfg)
    ds.setdefault("seed", seed)
    return ds


def _task_metric(model, data: Dataset, task: str, act_hook=None):
    if task == "anomaly":
        thr = nn.anomaly_threshold(model, data.val[0], act_hook=act_hook)
        rep = nn.evaluate(model, data.test, "anomaly", thr, act_hook=act_hook)
        return rep.f1
    rep = nn.evaluate(model, data.test, "classification", act_hook=act_hook)
    return rep.top1


def cmd_quantize(checkpoint, mode: str, out_dir="out", seed: int = 0):
    """Quantise the best pruned model; writes an accuracy-delta report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state, hyper, config, task = load_checkpoint(checkpoint)
    data = make_datasets(_with_seed(config["dataset"], seed))
    pruned = best_pruned(state, hyper, task)

    baseline = _task_metric(pruned.model, data, task)
    calibration = data.val[0] if mode == "4b/16b" else None
    qm = quantize_model(pruned, mode, calibration=calibration)
    quantized = _task_metric(qm.model, data, task, act_hook=qm.act_hook)

    report = {
        "mode": mode,
        "task": task,
        "metric": "f1" if task == "anomaly" else "top1",
        "baseline": baseline,
        "quantized": quantized,
        "delta": quantized - baseline,
        "weighted_sparsity": weighted_sparsity(pruned),
    }
    with open(out / "quantize_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    md = (
        "| model | mode | baseline | quantized | delta |\n|---|---|---|---|---|\n"
        f"| {config.get('model', {}).get('kind', 'model')} | {mode} "
        f"| {baseline:.4f} | {quantized:.4f} | {report['delta']:+.4f} |\n"
    )
    (out / "quantize_report.md").write_text(md)
    if qm.codebooks:
        cb_dir = out / "codebooks"
        cb_dir.mkdir(exist_ok=True)
        for i, cb in sorted(qm.codebooks.items()):
            save_codebook(cb, cb_dir / f"layer_{i}.json")
    order = _param_order(qm.model)
    (out / f"quantized_weights_{mode.replace('/', '-')}.bin").write_bytes(
        _weights_blob(qm.model.snapshot(), order)
    )
    return report


def cmd_bench(config: dict, seed: int = 0, workers: int = 1, out_dir="out"):
    """Time sparse vs dense per layer; writes CSV, markdown and env JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = bench_mod.run_bench(config.get("bench", {}), seed, workers)
    (out / "bench.csv").write_text(bench_mod.rows_to_csv(report.rows))
    (out / "bench.md").write_text(bench_mod.rows_to_markdown(report.rows))
    with open(out / "bench_env.json", "w") as fh:
        json.dump(report.environment, fh, indent=2, sort_keys=True)
    return report


def cmd_configure(report_csv, out_dir="out", expected_layers=None):
    """Derive the per-layer backend choice from a bench CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = bench_mod.rows_from_csv(Path(report_csv).read_text())
    cfg = bench_mod.backend_config(rows, expected_layers)
    with open(out / "backend_config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return cfg


def cmd_verify(seed: int = 0, verbose=print) -> int:
    """Run the oracle suite; returns 0 when every check passes."""
    from .verify import run_all_checks

    results = run_all_checks(seed)
    width = max(len(name) for name, _, _ in results)
    verbose(f"{'check'.ljust(width)}  result  detail")
    ok = True
    for name, passed, detail in results:
        ok &= passed
        verbose(f"{name.ljust(width)}  {'PASS' if passed else 'FAIL'}    {detail}")
    return 0 if ok else 1
