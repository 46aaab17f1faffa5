"""Evolutionary pruning with retraining, sensitivity-adapted sparsity steps,
a bounded elite archive, mutation/crossover over masks, and rewinding.

Masks are binary tensors shaped like each prunable layer's weights. The
per-layer sparsity target moves in steps of delta_i, shrinking when the
validation metric drops; the threshold that realizes a target is an exact
order statistic of the importance indicator, so the zero count is always
floor(target * layer_size).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)


@dataclass
class PruneHyper:
    """Knobs of the pruning loop.

    epsilon: sensitivity threshold separating "progress" (increment masks)
      from "stall" (mutate/crossover + rewind). Slightly negative by default
      so tiny metric dips still count as progress.
    alpha: importance blend between |mean gradient| and |weight|.
    beta: divisor scaling the sensitivity feedback into delta_i.
    gamma: genetic gate; stalls mutate when u > gamma, cross over otherwise.
    delta_init / init_sparsity: starting per-layer step and sparsity level.
    target_sparsity: optional per-layer ceiling(s); increments clamp there
      and best-entry selection only considers models that reached them.
    """

    n_it: int = 50
    epsilon: float = -0.002
    alpha: float = 0.1
    beta: float = 10.0
    gamma: float = 0.5
    ranked_len: int = 16
    delta_init: float = 0.05
    init_sparsity: float = 0.05
    layers_per_iter: int = 1
    lr: float = 0.01
    batch_size: int = 128
    target_sparsity: float | list | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.ranked_len < 1:
            raise ValueError("ranked_len must be >= 1")
        if self.delta_init <= 0:
            raise ValueError("delta_init must be positive")
        if not 0.0 <= self.init_sparsity <= 1.0:
            raise ValueError("init_sparsity must be in [0, 1]")


@dataclass
class PrunedModel:
    """(model, masks, optimizer, gradient statistics) plus its last metric.

    masks and grad_stats are keyed by layer index in model.layers; masks are
    uint8 tensors shaped like the layer weights.
    """

    model: nn.Model
    masks: dict
    optimizer: tuple = ("sgd", 0.01)
    grad_stats: dict = field(default_factory=dict)
    accuracy: float = 0.0


@dataclass
class RankedEntry:
    weights: dict            # (layer index, param name) -> array copy
    masks: dict
    grad_stats: dict
    accuracy: float
    layer_sparsity: dict     # realized zero fraction per prunable layer


class RankedList:
    """Bounded elite archive ordered by accuracy (best first)."""

    def __init__(self, max_len: int):
        self.max_len = max_len
        self.entries: list[RankedEntry] = []

    def __len__(self):
        return len(self.entries)

    def worst_accuracy(self):
        return self.entries[-1].accuracy if self.entries else None

    def insert(self, entry: RankedEntry) -> bool:
        """Insert when the list has room or the entry beats the worst one."""
        if len(self.entries) >= self.max_len:
            if entry.accuracy <= self.entries[-1].accuracy:
                return False
            self.entries.pop()
        pos = 0
        while pos < len(self.entries) and self.entries[pos].accuracy >= entry.accuracy:
            pos += 1
        self.entries.insert(pos, entry)
        return True

    def best(self, layer_targets: dict | None = None):
        """Best entry, optionally restricted to entries whose per-layer
        sparsity reached the given targets. None when nothing qualifies."""
        for entry in self.entries:
            if layer_targets:
                ok = all(
                    entry.layer_sparsity.get(i, 0.0) >= t - 1e-9
                    for i, t in layer_targets.items()
                )
                if not ok:
                    continue
            return entry
        return None


# ---------------------------------------------------------------------------
# mask arithmetic

def apply_mask(pruned: PrunedModel, layer_index: int) -> PrunedModel:
    """theta_i <- theta_i * M_i (element-wise); idempotent."""
    layer = pruned.model.layers[layer_index]
    mask = pruned.masks[layer_index]
    if mask.shape != layer.w.shape:
        raise ValueError(
            f"mask shape {mask.shape} != weight shape {layer.w.shape} "
            f"at layer {layer_index}"
        )
    layer.w *= mask.astype(layer.w.dtype)
    return pruned


def apply_all_masks(pruned: PrunedModel) -> PrunedModel:
    for i in pruned.masks:
        apply_mask(pruned, i)
    return pruned


def layer_sparsity(mask) -> float:
    if mask.size == 0:
        raise ValueError("empty mask")
    return float((mask.size - int(mask.sum())) / mask.size)


def weighted_sparsity(pruned: PrunedModel) -> float:
    """Size-weighted mean of layer sparsities over all prunable layers."""
    total = 0
    zeros = 0.0
    for mask in pruned.masks.values():
        total += mask.size
        zeros += mask.size * layer_sparsity(mask)
    return zeros / total


def update_gradient_stats(batch_grads: list, batch_count: int) -> np.ndarray:
    """Mean of the per-batch weight gradients over one epoch."""
    if batch_count <= 0:
        raise ValueError("batch_count must be positive")
    acc = np.zeros_like(batch_grads[0])
    for g in batch_grads:
        acc += g
    return acc / batch_count


def compute_sensitivity(acc_t: float, acc_prev: float) -> float:
    return acc_t - acc_prev


def update_delta(delta_i: float, sensitivity: float, beta: float) -> float:
    """delta_i <- delta_i + sensitivity * delta_i / beta."""
    return delta_i + sensitivity * delta_i / beta


def importance(theta, grad_stat, alpha: float):
    """g = alpha*|G| + (1-alpha)*|theta|, element-wise."""
    if theta.shape != grad_stat.shape:
        raise ValueError(f"shape mismatch {theta.shape} vs {grad_stat.shape}")
    return alpha * np.abs(grad_stat) + (1.0 - alpha) * np.abs(theta)


def mask_for_target(g, target: float):
    """Mask with exactly floor(target*size) zeros at the smallest importance
    values; ties break toward the lower flat index (stable sort)."""
    k = int(np.floor(target * g.size))
    mask = np.ones(g.size, dtype=np.uint8)
    if k > 0:
        order = np.argsort(g.ravel(), kind="stable")
        mask[order[:k]] = 0
    return mask.reshape(g.shape)


def random_mask(shape, sparsity: float, rng):
    size = int(np.prod(shape))
    k = int(np.floor(sparsity * size))
    mask = np.ones(size, dtype=np.uint8)
    if k > 0:
        mask[rng.choice(size, size=k, replace=False)] = 0
    return mask.reshape(shape)


def increment_mask(masks, delta, alpha, layers, model, grad_stats, sparsity,
                   targets=None):
    """Raise the sparsity target of each selected layer by delta_i and
    recompute its mask from the importance order statistic.

    Targets above 1 (or the configured per-layer ceiling) clamp and are
    logged. Returns the updated (masks, sparsity) mappings in place.
    """
    for i in layers:
        ceiling = 1.0 if targets is None else min(1.0, targets.get(i, 1.0))
        target = sparsity[i] + delta[i]
        if target > ceiling:
            log.warning("layer %d sparsity target %.4f clamped to %.4f",
                        i, target, ceiling)
            target = ceiling
        g = importance(model.layers[i].w, grad_stats[i], alpha)
        masks[i] = mask_for_target(g, target)
        sparsity[i] = target
    return masks, sparsity


def mutate(pruned: PrunedModel, layers, alpha_m: float, delta, sparsity,
           alpha: float):
    """Lower the selected layers' sparsity by alpha_m * delta_i and rebuild
    their masks; alpha_m is clamped into [0, 1]."""
    alpha_m = min(1.0, max(0.0, alpha_m))
    for i in layers:
        target = max(0.0, sparsity[i] - alpha_m * delta[i])
        g = importance(pruned.model.layers[i].w, pruned.grad_stats[i], alpha)
        pruned.masks[i] = mask_for_target(g, target)
        sparsity[i] = target
        apply_mask(pruned, i)
    return pruned


def crossover(pruned: PrunedModel, donor: RankedEntry, layers, sparsity):
    """Splice the donor's masks into the selected layers."""
    for i in layers:
        donor_mask = donor.masks[i]
        if donor_mask.shape != pruned.masks[i].shape:
            raise ValueError(f"donor mask shape mismatch at layer {i}")
        pruned.masks[i] = donor_mask.copy()
        sparsity[i] = layer_sparsity(donor_mask)
        apply_mask(pruned, i)
    return pruned


def rewind(pruned: PrunedModel, snapshot: dict) -> PrunedModel:
    """Restore surviving weights from the epoch-start snapshot; pruned
    positions stay zero. Non-masked parameters restore verbatim."""
    if snapshot is None:
        raise ValueError("missing rewind snapshot")
    for (i, name), saved in snapshot.items():
        param = getattr(pruned.model.layers[i], name)
        if name == "w" and i in pruned.masks:
            param[...] = np.where(pruned.masks[i].astype(bool), saved, 0)
        else:
            param[...] = saved
    return pruned


def ranked_list_update(ranked: RankedList, pruned: PrunedModel) -> RankedList:
    """Deep-copy the candidate into the archive under the insert rule."""
    entry = RankedEntry(
        weights=pruned.model.snapshot(),
        masks={i: m.copy() for i, m in pruned.masks.items()},
        grad_stats={i: g.copy() for i, g in pruned.grad_stats.items()},
        accuracy=pruned.accuracy,
        layer_sparsity={i: layer_sparsity(m) for i, m in pruned.masks.items()},
    )
    ranked.insert(entry)
    return ranked


# ---------------------------------------------------------------------------
# the loop

@dataclass
class PruneState:
    """Everything the loop carries between iterations (and to checkpoints)."""

    pruned: PrunedModel
    delta: dict
    sparsity: dict
    ranked: RankedList
    acc_prev: float
    iteration: int
    rng: np.random.Generator
    history: list = field(default_factory=list)
    sensitivity_log: dict = field(default_factory=dict)


@dataclass
class PruneResult:
    best: PrunedModel
    state: PruneState

    @property
    def history(self):
        return self.state.history


def _metric(model, data, task, batch_size=64, act_hook=None):
    if task == "anomaly":
        thr = nn.anomaly_threshold(model, data.val[0], batch_size, act_hook)
        rep = nn.evaluate(model, data.val, "anomaly", thr, batch_size, act_hook)
        return rep.f1
    rep = nn.evaluate(model, data.val, "classification",
                      batch_size=batch_size, act_hook=act_hook)
    return rep.top1


def _layer_targets(hyper: PruneHyper, prunable) -> dict | None:
    t = hyper.target_sparsity
    if t is None:
        return None
    if np.isscalar(t):
        return {i: float(t) for i in prunable}
    if len(t) != len(prunable):
        raise ValueError(
            f"target_sparsity needs one value per prunable layer "
            f"({len(prunable)}), got {len(t)}"
        )
    return {i: float(v) for i, v in zip(prunable, t)}


def init_prune_state(model: nn.Model, data, hyper: PruneHyper, rng,
                     task="classification") -> PruneState:
    prunable = model.prunable_indices()
    if not prunable:
        raise ValueError("model has no prunable layers")
    masks = {
        i: random_mask(model.layers[i].w.shape, hyper.init_sparsity, rng)
        for i in prunable
    }
    pruned = PrunedModel(
        model=model,
        masks=masks,
        optimizer=("sgd", hyper.lr),
        grad_stats={i: np.zeros_like(model.layers[i].w) for i in prunable},
    )
    apply_all_masks(pruned)
    pruned.accuracy = _metric(model, data, task, hyper.batch_size)
    ranked = RankedList(hyper.ranked_len)
    ranked_list_update(ranked, pruned)
    return PruneState(
        pruned=pruned,
        delta={i: hyper.delta_init for i in prunable},
        sparsity={i: hyper.init_sparsity for i in prunable},
        ranked=ranked,
        acc_prev=pruned.accuracy,
        iteration=0,
        rng=rng,
    )


def run_prune(state: PruneState, data, hyper: PruneHyper, iterations: int,
              task="classification") -> PruneState:
    """Advance the loop. Each iteration: sample layers, train one masked
    epoch, refresh gradient statistics, measure sensitivity, then either
    increment masks (progress) or mutate/cross over and rewind (stall)."""
    pruned = state.pruned
    model = pruned.model
    prunable = model.prunable_indices()
    targets = _layer_targets(hyper, prunable)
    rng = state.rng
    X_train, y_train = data.train
    train_labels = y_train if task == "classification" else None

    for _ in range(iterations):
        state.iteration += 1
        below = [
            i for i in prunable
            if targets is None or state.sparsity[i] < targets[i] - 1e-9
        ]
        pool = below if below else prunable
        k = min(hyper.layers_per_iter, len(pool))
        chosen = sorted(rng.choice(len(pool), size=k, replace=False))
        layers = [pool[j] for j in chosen]

        snapshot = model.snapshot()
        train_loss, mean_grads = nn.train_epoch(
            model, X_train, train_labels, hyper.lr, hyper.batch_size, rng,
            masks=pruned.masks,
        )
        for i, g in mean_grads.items():
            pruned.grad_stats[i] = g

        acc_t = _metric(model, data, task, hyper.batch_size)
        sensitivity = compute_sensitivity(acc_t, state.acc_prev)
        state.acc_prev = acc_t
        pruned.accuracy = acc_t
        for i in layers:
            state.sensitivity_log.setdefault(i, []).append(
                (state.iteration, sensitivity)
            )
            state.delta[i] = update_delta(state.delta[i], sensitivity, hyper.beta)

        action = "increment"
        if sensitivity > hyper.epsilon:
            ranked_list_update(state.ranked, pruned)
            increment_mask(
                pruned.masks, state.delta, hyper.alpha, layers, model,
                pruned.grad_stats, state.sparsity, targets,
            )
            for i in layers:
                apply_mask(pruned, i)
        else:
            if rng.random() > hyper.gamma:
                action = "mutate"
                mutate(pruned, layers, float(rng.random()), state.delta,
                       state.sparsity, hyper.alpha)
            else:
                action = "crossover"
                donor = state.ranked.entries[
                    int(rng.integers(len(state.ranked)))
                ]
                crossover(pruned, donor, layers, state.sparsity)
            rewind(pruned, snapshot)

        state.history.append({
            "iteration": state.iteration,
            "layers": layers,
            "loss": train_loss,
            "accuracy": acc_t,
            "sensitivity": sensitivity,
            "action": action,
            "weighted_sparsity": weighted_sparsity(pruned),
        })
    return state


def best_pruned(state: PruneState, hyper: PruneHyper, task="classification"):
    """Materialize the ranked list's best entry as a PrunedModel.

    With sparsity targets configured, only entries that reached them
    qualify; if none does, the final loop state is returned instead.
    """
    prunable = state.pruned.model.prunable_indices()
    targets = _layer_targets(hyper, prunable)
    entry = state.ranked.best(targets)
    if entry is None:
        return state.pruned
    model = state.pruned.model.copy()
    model.load_snapshot(entry.weights)
    best = PrunedModel(
        model=model,
        masks={i: m.copy() for i, m in entry.masks.items()},
        optimizer=state.pruned.optimizer,
        grad_stats={i: g.copy() for i, g in entry.grad_stats.items()},
        accuracy=entry.accuracy,
    )
    apply_all_masks(best)
    return best


def prune_loop(model: nn.Model, data, hyper: PruneHyper, rng,
               task="classification") -> PruneResult:
    """Run the full loop per the hyperparameters and return the best model."""
    state = init_prune_state(model, data, hyper, rng, task)
    run_prune(state, data, hyper, hyper.n_it, task)
    return PruneResult(best=best_pruned(state, hyper, task), state=state)
