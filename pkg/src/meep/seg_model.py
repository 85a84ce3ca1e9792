"""Small fully convolutional per-pixel softmax segmenter with hand-written backprop.

Architecture (fixed)::

    conv3x3(1->16) -> ReLU -> conv3x3(16->16) -> ReLU -> conv3x3(16->16) -> ReLU -> conv1x1(16->K)

All convolutions are stride 1 with zero "same" padding. Layout is ``[B, C, H, W]``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor_core import load_tensor, save_tensor, softmax_channels

HIDDEN = 16


@dataclass
class ConvLayer:
    weight: np.ndarray  # [out, in, kh, kw]
    bias: np.ndarray  # [out]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass
class ModelParams:
    layers: list[ConvLayer]

    @property
    def k_classes(self) -> int:
        return self.layers[-1].weight.shape[0]

    def named_tensors(self):
        for i, layer in enumerate(self.layers):
            yield f"conv{i}.weight", layer.weight
            yield f"conv{i}.bias", layer.bias

    def copy(self) -> "ModelParams":
        return ModelParams([ConvLayer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_tensors())


# Gradients have exactly the parameter layout.
ParamGrads = ModelParams


def architecture(k_classes: int, hidden: int = HIDDEN) -> list[tuple[int, int, int]]:
    """(out_ch, in_ch, kernel) per layer."""
    return [(hidden, 1, 3), (hidden, hidden, 3), (hidden, hidden, 3), (k_classes, hidden, 1)]


def init_params(k_classes: int, rng: np.random.Generator, hidden: int = HIDDEN) -> ModelParams:
    """He-normal weights (variance 2 / fan_in), zero biases."""
    if k_classes < 2:
        raise ValueError(f"need at least 2 classes, got {k_classes}")
    layers = []
    for out_ch, in_ch, k in architecture(k_classes, hidden):
        fan_in = in_ch * k * k
        w = rng.standard_normal((out_ch, in_ch, k, k)) * math.sqrt(2.0 / fan_in)
        layers.append(ConvLayer(w, np.zeros(out_ch)))
    return ModelParams(layers)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """NHWC ``[B, H, W, C]`` -> ``[B*H*W, k*k*C]`` with zero same-padding; columns ordered (ki, kj, c)."""
    b, h, w, c = x.shape
    if k == 1:
        return x.reshape(b * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)], axis=3)
    return cols.reshape(b * h * w, k * k * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns NHWC."""
    b, h, w, c = shape
    if k == 1:
        return dcols.reshape(b, h, w, c)
    p = k // 2
    d = dcols.reshape(b, h, w, k * k, c)
    out = np.zeros((b, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w, :] += d[:, :, :, i * k + j, :]
    return out[:, p:p + h, p:p + w, :]


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    """``[out, C, k, k]`` -> ``[out, k*k*C]`` matching the im2col column order."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


@dataclass
class ActivationCache:
    input_shapes: list[tuple[int, int, int, int]] = field(default_factory=list)
    cols: list[np.ndarray] = field(default_factory=list)
    relu_masks: list[np.ndarray] = field(default_factory=list)
    n_layers: int = 0


def _check_arch(params: ModelParams) -> None:
    if len(params.layers) != 4:
        raise ValueError(f"expected 4 conv layers, got {len(params.layers)}")
    prev = 1
    for i, layer in enumerate(params.layers):
        out_ch, in_ch, kh, kw = layer.weight.shape
        if in_ch != prev or kh != kw or layer.bias.shape != (out_ch,):
            raise ValueError(f"layer {i}: inconsistent shapes weight={layer.weight.shape} bias={layer.bias.shape}")
        prev = out_ch


def forward(params: ModelParams, images: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError(f"images must be [B, 1, H, W], got {images.shape}")
    if images.shape[2] < 3 or images.shape[3] < 3:
        raise ValueError(f"H and W must be >= 3, got {images.shape[2:]}")
    _check_arch(params)
    b, _, h, w = images.shape
    cache = ActivationCache(n_layers=len(params.layers))
    x = images.transpose(0, 2, 3, 1)
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        out_ch = layer.weight.shape[0]
        cols = _im2col(x, layer.kernel)
        cache.input_shapes.append(x.shape)
        cache.cols.append(cols)
        y = cols @ _weight_matrix(layer.weight).T + layer.bias
        if i < last:
            mask = y > 0
            cache.relu_masks.append(mask)
            y = y * mask
        x = y.reshape(b, h, w, out_ch)
    logits = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("forward produced non-finite logits")
    return logits, cache


def backward(params: ModelParams, cache: ActivationCache, grad_logits: np.ndarray) -> ParamGrads:
    """Gradients of the loss w.r.t. every weight and bias. ReLU'(0) = 0."""
    if cache.n_layers != len(params.layers):
        raise ValueError("activation cache does not match parameters")
    b, h, w, _ = cache.input_shapes[0]
    expected = (b, params.k_classes, h, w)
    if grad_logits.shape != expected:
        raise ValueError(f"grad_logits shape {grad_logits.shape} vs logits {expected}")
    g = grad_logits.transpose(0, 2, 3, 1).reshape(b * h * w, -1)
    grads: list[ConvLayer | None] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        out_ch, in_ch, kh, kw = layer.weight.shape
        if i < len(params.layers) - 1:
            g = g * cache.relu_masks[i]
        cols = cache.cols[i]
        if cols.shape[0] != g.shape[0] or cols.shape[1] != layer.weight[0].size:
            raise ValueError(f"activation cache does not match layer {i}")
        dw = (g.T @ cols).reshape(out_ch, kh, kw, in_ch).transpose(0, 3, 1, 2)
        grads[i] = ConvLayer(np.ascontiguousarray(dw), g.sum(axis=0))
        if i > 0:
            dx = _col2im(g @ _weight_matrix(layer.weight), cache.input_shapes[i], layer.kernel)
            g = dx.reshape(b * h * w, -1)
    return ModelParams(grads)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    base_lr: float = 1e-4
    decay_factor: float = 0.85
    decay_interval: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamState":
        zeros = [np.zeros_like(t) for _, t in params.named_tensors()]
        return cls(m=zeros, v=[z.copy() for z in zeros], **kw)

    def effective_lr(self, epoch: int | None = None) -> float:
        e = self.epoch if epoch is None else epoch
        return self.base_lr * self.decay_factor ** (e // self.decay_interval)


def adam_step(params: ModelParams, grads: ParamGrads, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place. Learning rate follows the epoch schedule."""
    named = list(params.named_tensors())
    gnamed = list(grads.named_tensors())
    if len(named) != len(gnamed) or len(named) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    lr = state.effective_lr()
    t = state.step + 1
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    updates = []
    for idx, ((name, p), (_, g)) in enumerate(zip(named, gnamed)):
        if p.shape != g.shape or state.m[idx].shape != p.shape:
            raise ValueError(f"{name}: shape {p.shape} vs grad {g.shape}")
        m = state.beta1 * state.m[idx] + (1 - state.beta1) * g
        v = state.beta2 * state.v[idx] + (1 - state.beta2) * g * g
        new_p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if not np.all(np.isfinite(new_p)):
            raise FloatingPointError(f"non-finite parameter after Adam update in {name}")
        updates.append((m, v, new_p))
    for idx, (m, v, new_p) in enumerate(updates):
        state.m[idx], state.v[idx] = m, v
        named[idx][1][...] = new_p
    state.step = t
    return params, state


def predict_probs(params: ModelParams, images: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch):
        logits, _ = forward(params, images[s:s + batch])
        out.append(softmax_channels(logits))
    return np.concatenate(out, axis=0)


def save_checkpoint(params: ModelParams, state: AdamState | None, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, t in params.named_tensors():
        fname = f"{name}.sgt"
        save_tensor(t, d / fname)
        tensors.append({"name": name, "file": fname, "shape": list(t.shape)})
    manifest = {"format": "meep-checkpoint/1", "k_classes": params.k_classes, "tensors": tensors}
    if state is not None:
        manifest["adam"] = {
            k: getattr(state, k)
            for k in ("base_lr", "decay_factor", "decay_interval", "beta1", "beta2", "eps", "step", "epoch")
        }
        for i, (name, _) in enumerate(params.named_tensors()):
            save_tensor(state.m[i], d / f"{name}.adam_m.sgt")
            save_tensor(state.v[i], d / f"{name}.adam_v.sgt")
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return d


def load_checkpoint(directory) -> tuple[ModelParams, AdamState | None]:
    d = Path(directory)
    with open(d / "manifest.json") as fh:
        manifest = json.load(fh)
    loaded = {}
    for entry in manifest["tensors"]:
        t = load_tensor(d / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise ValueError(f"{entry['name']}: manifest shape {entry['shape']} vs file {list(t.shape)}")
        loaded[entry["name"]] = t
    n_layers = len(manifest["tensors"]) // 2
    params = ModelParams([ConvLayer(loaded[f"conv{i}.weight"], loaded[f"conv{i}.bias"]) for i in range(n_layers)])
    _check_arch(params)
    state = None
    if "adam" in manifest:
        names = [n for n, _ in params.named_tensors()]
        state = AdamState(
            m=[load_tensor(d / f"{n}.adam_m.sgt") for n in names],
            v=[load_tensor(d / f"{n}.adam_v.sgt") for n in names],
            **manifest["adam"],
        )
    return params, state


def checkpoint_exists(directory) -> bool:
    return os.path.exists(os.path.join(directory, "manifest.json"))
