"""Minimal training stack: small 1D/2D CNNs with analytic backprop and SGD.

Only what the pruning loop and quantisation calibration need. Convolution
forward shares the kernel used by dense_conv_reference, so a single conv
layer reproduces the reference bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import ConvGeometry


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2D:
    """Convolution without bias; weights (D, C, H_f, W_f). Prunable."""

    kind = "conv2d"
    prunable = True

    def __init__(self, geometry: ConvGeometry, rng, dtype=np.float32):
        self.geometry = geometry
        g = geometry
        fan_in = g.in_channels * g.filter_h * g.filter_w
        fan_out = g.out_channels * g.filter_h * g.filter_w
        self.w = glorot_uniform(
            rng, (g.out_channels, g.in_channels, g.filter_h, g.filter_w),
            fan_in, fan_out, dtype,
        )
        self.grad_w = None
        self._xpad = None

    def forward(self, x):
        g = self.geometry
        h_pad, w_pad = g.padding
        if h_pad or w_pad:
            xpad = np.zeros((x.shape[0], g.in_channels, g.padded_h, g.padded_w), x.dtype)
            xpad[:, :, h_pad : h_pad + g.input_h, w_pad : w_pad + g.input_w] = x
        else:
            xpad = np.ascontiguousarray(x)
        self._xpad = xpad
        out = np.zeros((x.shape[0], g.out_channels, g.out_h, g.out_w), x.dtype)
        kernels.dense_conv_channels(
            xpad, self.w, out, 0, g.out_channels, g.stride[0], g.stride[1]
        )
        return out

    def backward(self, dout):
        g = self.geometry
        dout = np.ascontiguousarray(dout)
        self.grad_w = np.zeros_like(self.w)
        kernels.conv_grad_weights(self._xpad, dout, self.grad_w, g.stride[0], g.stride[1])
        dxpad = np.zeros_like(self._xpad)
        kernels.conv_grad_input(self.w, dout, dxpad, g.stride[0], g.stride[1])
        h_pad, w_pad = g.padding
        if h_pad or w_pad:
            return np.ascontiguousarray(
                dxpad[:, :, h_pad : h_pad + g.input_h, w_pad : w_pad + g.input_w]
            )
        return dxpad

    def params(self):
        return {"w": self.w}

    def grads(self):
        return {"w": self.grad_w}


class Conv1D(Conv2D):
    """Conv2D on degenerate (w = 1) geometry; tracked as its own layer class."""

    kind = "conv1d"


class ReLU:
    kind = "relu"
    prunable = False

    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)

    def params(self):
        return {}

    def grads(self):
        return {}


class MaxPool2:
    """2x2 max pooling, stride 2; input dims must be even. Ties route to the
    first window element so gradients are deterministic."""

    kind = "maxpool"
    prunable = False

    def __init__(self):
        self._idx = None
        self._shape = None

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
        self._shape = x.shape
        xr = (
            x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        self._idx = xr.argmax(axis=-1)
        return np.take_along_axis(xr, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        n, c, h, w = self._shape
        dxr = np.zeros((n, c, h // 2, w // 2, 4), dout.dtype)
        np.put_along_axis(dxr, self._idx[..., None], dout[..., None], axis=-1)
        return (
            dxr.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )

    def params(self):
        return {}

    def grads(self):
        return {}


class Flatten:
    kind = "flatten"
    prunable = False

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)

    def params(self):
        return {}

    def grads(self):
        return {}


class Dense:
    """Fully connected layer; weights (out, in) plus bias. Weight prunable."""

    kind = "dense"
    prunable = True

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.w = glorot_uniform(
            rng, (out_features, in_features), in_features, out_features, dtype
        )
        self.b = np.zeros(out_features, dtype)
        self.grad_w = None
        self.grad_b = None
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dout):
        self.grad_w = dout.T @ self._x
        self.grad_b = dout.sum(axis=0)
        return dout @ self.w

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.grad_w, "b": self.grad_b}


@dataclass
class LayerSpec:
    """Declarative layer description used by build_model."""

    kind: str
    params: dict = field(default_factory=dict)

    @property
    def prunable(self) -> bool:
        return self.kind in ("conv2d", "conv1d", "dense")


def softmax_xent(logits, labels):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def mse(pred, target):
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


class Model:
    """Ordered layer list plus a loss head ('softmax-xent' or 'mse')."""

    def __init__(self, layers, loss="softmax-xent", dtype=np.float32):
        if loss not in ("softmax-xent", "mse"):
            raise ValueError(f"unknown loss kind {loss!r}")
        self.layers = list(layers)
        self.loss_kind = loss
        self.dtype = dtype

    def prunable_indices(self):
        return [i for i, l in enumerate(self.layers) if l.prunable]

    def forward(self, x, act_hook=None):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if act_hook is not None:
            x = act_hook(-1, x)
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if act_hook is not None:
                x = act_hook(i, x)
        return x

    def loss(self, output, target):
        if self.loss_kind == "softmax-xent":
            return softmax_xent(output, target)
        return mse(output, np.asarray(target, dtype=output.dtype))

    def backward_from(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def snapshot(self):
        return {
            (i, name): p.copy()
            for i, layer in enumerate(self.layers)
            for name, p in layer.params().items()
        }

    def load_snapshot(self, snap):
        for (i, name), p in snap.items():
            getattr(self.layers[i], name)[...] = p

    def copy(self):
        m = Model.__new__(Model)
        m.loss_kind = self.loss_kind
        m.dtype = self.dtype
        m.layers = []
        for layer in self.layers:
            c = layer.__class__.__new__(layer.__class__)
            c.__dict__.update(layer.__dict__)
            for name, p in layer.params().items():
                setattr(c, name, p.copy())
            m.layers.append(c)
        return m

    def param_count(self):
        return sum(p.size for l in self.layers for p in l.params().values())


def forward(model: Model, batch, act_hook=None):
    """Run the model on (X, target); returns (output activations, loss)."""
    x, y = batch
    out = model.forward(x, act_hook)
    loss, _ = model.loss(out, y)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    return out, loss


def backward(model: Model, batch):
    """Forward + backprop; returns (loss, per-layer gradient dict)."""
    x, y = batch
    out = model.forward(x)
    loss, dout = model.loss(out, y)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    model.backward_from(dout)
    grads = {
        i: dict(layer.grads())
        for i, layer in enumerate(model.layers)
        if layer.params()
    }
    return loss, grads


def sgd_step(model: Model, grads, lr: float, masks=None):
    """theta <- theta - lr * grad, then re-apply masks to prunable weights."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for i, layer_grads in grads.items():
        layer = model.layers[i]
        for name, g in layer_grads.items():
            getattr(layer, name)[...] -= lr * g
        if masks is not None and i in masks:
            layer.w *= masks[i].astype(layer.w.dtype)
    return model


def train_epoch(model: Model, X, y, lr, batch_size, rng, masks=None):
    """One shuffled pass; returns (mean loss, per-layer mean weight gradients).

    The gradient means are taken over batches (the epoch's gradient
    statistics); masked positions keep their raw gradients.
    """
    n = X.shape[0]
    order = rng.permutation(n)
    grad_sums = {}
    losses = []
    batches = 0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        loss, grads = backward(model, (X[idx], y[idx] if y is not None else X[idx]))
        sgd_step(model, grads, lr, masks)
        losses.append(loss)
        batches += 1
        for i in model.prunable_indices():
            g = grads[i]["w"]
            if i in grad_sums:
                grad_sums[i] += g
            else:
                grad_sums[i] = g.copy()
    mean_grads = {i: s / batches for i, s in grad_sums.items()}
    return float(np.mean(losses)), mean_grads


@dataclass
class EvalReport:
    top1: float
    loss: float
    f1: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


def reconstruction_errors(model: Model, X, batch_size=64, act_hook=None):
    """Per-sample mean squared reconstruction error."""
    errs = []
    for start in range(0, X.shape[0], batch_size):
        xb = np.ascontiguousarray(X[start : start + batch_size], dtype=model.dtype)
        out = model.forward(xb, act_hook)
        errs.append(((out - xb) ** 2).mean(axis=(1, 2, 3)))
    return np.concatenate(errs)


def anomaly_threshold(model: Model, X_val, batch_size=64, act_hook=None):
    """Detection threshold: mean + 3 std of validation reconstruction error."""
    errs = reconstruction_errors(model, X_val, batch_size, act_hook)
    return float(errs.mean() + 3.0 * errs.std())


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def evaluate(
    model: Model, split, task="classification",
    threshold=None, batch_size=64, act_hook=None,
) -> EvalReport:
    """top1 for classification; F1 by reconstruction-error thresholding for
    anomaly tasks (threshold computed by anomaly_threshold on validation)."""
    X, y = split
    if X.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty split")
    if task == "classification":
        correct = 0
        losses = []
        for start in range(0, X.shape[0], batch_size):
            xb = X[start : start + batch_size]
            yb = y[start : start + batch_size]
            out = model.forward(np.ascontiguousarray(xb, dtype=model.dtype), act_hook)
            loss, _ = model.loss(out, yb)
            losses.append(loss * xb.shape[0])
            correct += int((out.argmax(axis=1) == yb).sum())
        return EvalReport(
            top1=correct / X.shape[0], loss=float(np.sum(losses) / X.shape[0])
        )
    if task == "anomaly":
        if threshold is None:
            raise ValueError("anomaly evaluation needs a threshold")
        errs = reconstruction_errors(model, X, batch_size, act_hook)
        flagged = errs > threshold
        labels = y.astype(bool)
        tp = int(np.sum(flagged & labels))
        fp = int(np.sum(flagged & ~labels))
        fn = int(np.sum(~flagged & labels))
        acc = float(np.mean(flagged == labels))
        return EvalReport(
            top1=acc, loss=float(errs.mean()), f1=f1_score(tp, fp, fn),
            tp=tp, fp=fp, fn=fn,
        )
    raise ValueError(f"unknown task {task!r}")


def build_model(specs: list[LayerSpec], loss: str, rng, dtype=np.float32) -> Model:
    layers = []
    for spec in specs:
        p = spec.params
        if spec.kind in ("conv2d", "conv1d"):
            cls = Conv2D if spec.kind == "conv2d" else Conv1D
            layers.append(cls(p["geometry"], rng, dtype))
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "maxpool":
            layers.append(MaxPool2())
        elif spec.kind == "flatten":
            layers.append(Flatten())
        elif spec.kind == "dense":
            layers.append(Dense(p["in_features"], p["out_features"], rng, dtype))
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return Model(layers, loss, dtype)


def conv_spec(kind, in_ch, out_ch, kh, kw, in_h, in_w, stride=(1, 1), padding=(0, 0)):
    geometry = ConvGeometry(
        in_channels=in_ch, out_channels=out_ch, filter_h=kh, filter_w=kw,
        input_h=in_h, input_w=in_w, stride=stride, padding=padding,
    )
    return LayerSpec(kind, {"geometry": geometry})


def toy_classifier_specs(in_shape=(1, 12, 12), classes=8):
    """conv(3x3,16)-relu-pool-conv(3x3,32)-relu-pool-dense, same-padded."""
    c, h, w = in_shape
    specs = [
        conv_spec("conv2d", c, 16, 3, 3, h, w, padding=(1, 1)),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        conv_spec("conv2d", 16, 32, 3, 3, h // 2, w // 2, padding=(1, 1)),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("dense", {"in_features": 32 * (h // 4) * (w // 4),
                            "out_features": classes}),
    ]
    return specs


def autoencoder_1d_specs(channels=64, length=300):
    """Twelve-conv encoder/decoder over (channels, length, 1) sequences,
    alternating 3x1 (same-padded) and 1x1 filters. Only the 3x1 layers are
    followed by relu; keeping the 1x1 layers linear preserves signal through
    the 12-layer chain, which plain SGD needs to train in reasonable time."""
    widths = [channels, 16, 16, 12, 12, 8, 8, 8, 8, 12, 12, 16, 16]
    kernel = [3, 1, 3, 1, 3, 1, 1, 3, 1, 3, 1, 3]
    specs = []
    for i in range(12):
        cin = widths[i]
        cout = widths[i + 1] if i < 11 else channels
        k = kernel[i]
        pad = (1, 0) if k == 3 else (0, 0)
        specs.append(conv_spec("conv1d", cin, cout, k, 1, length, 1, padding=pad))
        if i < 11 and k == 3:
            specs.append(LayerSpec("relu"))
    return specs
