"""Segmentation losses and entropy regularizers with exact logit gradients.

Every public loss returns a :class:`LossResult` whose ``grad_logits`` is the
derivative of ``value`` with respect to the ``[B, K, H, W]`` logits.

Regularized objectives take the form ``base + contribution``:

* ``none``                -> 0
* ``confidence_penalty``  -> ``-beta * H(all pixels)``
* ``meep_h``              -> ``-lam * H(misclassified pixels)``
* ``meep_kl``             -> ``+lam * CE(uniform, p)`` over misclassified pixels

The misclassified mask is rebuilt from the current predictions on every call
and is treated as a constant for differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import EPS_P, safe_log, softmax_channels

EPS_DICE = 1e-6

BASES = ("dice", "ce", "focal")
REGULARIZERS = ("none", "confidence_penalty", "meep_h", "meep_kl")


@dataclass
class LossResult:
    value: float
    grad_logits: np.ndarray

    def __add__(self, other: "LossResult") -> "LossResult":
        return LossResult(self.value + other.value, self.grad_logits + other.grad_logits)

    def scaled(self, w: float) -> "LossResult":
        return LossResult(w * self.value, w * self.grad_logits)


@dataclass
class KLResult(LossResult):
    # value - ln K, i.e. the mean KL(uniform || p) over the mask
    kl_value: float = 0.0


@dataclass
class MisclassifiedMask:
    mask: np.ndarray  # bool [B, H, W]
    count: int


@dataclass
class ObjectiveSpec:
    base: str = "dice"
    regularizer: str = "none"
    lam: float = 0.0
    beta: float = 0.2
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown base loss {self.base!r}; choose from {BASES}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; choose from {REGULARIZERS}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")

    @property
    def weight(self) -> float:
        return self.beta if self.regularizer == "confidence_penalty" else self.lam

    @property
    def label(self) -> str:
        return self.base if self.regularizer == "none" else f"{self.base}+{self.regularizer}"

    def to_json(self) -> dict:
        return {"base": self.base, "regularizer": self.regularizer, "lambda": self.lam,
                "beta": self.beta, "focal_gamma": self.focal_gamma}

    @classmethod
    def from_json(cls, d: dict) -> "ObjectiveSpec":
        known = {"base", "regularizer", "lambda", "beta", "focal_gamma"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown objective fields: {sorted(extra)}")
        return cls(base=d.get("base", "dice"), regularizer=d.get("regularizer", "none"),
                   lam=float(d.get("lambda", 0.0)), beta=float(d.get("beta", 0.2)),
                   focal_gamma=float(d.get("focal_gamma", 2.0)))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ValueError(f"logits must be [B, K, H, W], got {logits.shape}")
    b, k, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    return (labels[:, None, :, :] == np.arange(k)[None, :, None, None]).astype(np.float64)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back through the softmax."""
    return probs * (grad_probs - (probs * grad_probs).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossResult:
    labels = _check_labels(logits, labels)
    p = softmax_channels(logits)
    onehot = _onehot(labels, p.shape[1])
    p_true = (p * onehot).sum(axis=1)
    n = p_true.size
    value = float(-safe_log(p_true).sum() / n)
    return LossResult(value, (p - onehot) / n)


def focal_loss(logits: np.ndarray, labels: np.ndarray, gamma: float = 2.0) -> LossResult:
    """Mean of ``-(1 - p_t)^gamma * log p_t``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    labels = _check_labels(logits, labels)
    p = softmax_channels(logits)
    onehot = _onehot(labels, p.shape[1])
    pt = (p * onehot).sum(axis=1)
    n = pt.size
    pt_c = np.maximum(pt, EPS_P)
    log_pt = np.log(pt_c)
    q = 1.0 - pt
    mod = q ** gamma
    value = float(-(mod * log_pt).sum() / n)
    # d/dpt of -(1-pt)^g log pt = g (1-pt)^(g-1) log pt - (1-pt)^g / pt
    if gamma == 0:
        dmod_term = np.zeros_like(pt)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod_term = np.where(q > 0, gamma * mod * log_pt / np.where(q > 0, q, 1.0), 0.0)
    d_pt = (dmod_term - mod / pt_c) / n
    # d pt / d z_k = pt (onehot_k - p_k)
    grad = d_pt[:, None] * pt[:, None] * (onehot - p)
    return LossResult(value, grad)


def soft_dice(logits: np.ndarray, labels: np.ndarray) -> LossResult:
    """``1 - mean_c (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)`` over foreground classes.

    Sums run over the whole batch. Background (class 0) is excluded when K > 2;
    for K = 2 only class 1 is scored.
    """
    labels = _check_labels(logits, labels)
    p = softmax_channels(logits)
    k = p.shape[1]
    onehot = _onehot(labels, k)
    classes = range(1, k)
    n_cls = len(classes)
    grad_p = np.zeros_like(p)
    dice_sum = 0.0
    for c in classes:
        pc, gc = p[:, c], onehot[:, c]
        num = 2.0 * (pc * gc).sum() + EPS_DICE
        den = (pc * pc).sum() + (gc * gc).sum() + EPS_DICE
        dice_sum += num / den
        grad_p[:, c] = -(2.0 * gc * den - num * 2.0 * pc) / (den * den) / n_cls
    value = 1.0 - dice_sum / n_cls
    return LossResult(float(value), softmax_backward(p, grad_p))


def misclassified_set(probs: np.ndarray, labels: np.ndarray) -> MisclassifiedMask:
    """Pixels whose argmax class (ties -> lowest index) differs from the label."""
    labels = np.asarray(labels)
    if probs.ndim != 4 or labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} disagree")
    mask = np.argmax(probs, axis=1) != labels
    return MisclassifiedMask(mask, int(mask.sum()))


def _as_mask(mask) -> np.ndarray:
    return mask.mask if isinstance(mask, MisclassifiedMask) else np.asarray(mask, dtype=bool)


def entropy_term(probs: np.ndarray, mask) -> LossResult:
    """Mean Shannon entropy (nats) over the masked pixels; zero for an empty mask."""
    m = _as_mask(mask)
    n = int(m.sum())
    if n == 0:
        return LossResult(0.0, np.zeros_like(probs))
    logp = safe_log(probs)
    plogp = probs * logp
    mf = m[:, None].astype(np.float64)
    value = float(-(plogp * mf).sum() / n)
    # dH/dz_k = -p_k (log p_k - sum_j p_j log p_j)
    grad = -probs * (logp - plogp.sum(axis=1, keepdims=True)) * mf / n
    return LossResult(value, grad)


def kl_uniform_term(probs: np.ndarray, mask) -> KLResult:
    """Cross-entropy ``-(1/K) sum_k log p_k`` between uniform and ``p``, averaged over the mask."""
    m = _as_mask(mask)
    n = int(m.sum())
    k = probs.shape[1]
    if n == 0:
        return KLResult(0.0, np.zeros_like(probs), 0.0)
    mf = m[:, None].astype(np.float64)
    value = float(-(safe_log(probs) * mf).sum() / (k * n))
    grad = (probs - 1.0 / k) * mf / n
    return KLResult(value, grad, value - math.log(k))


def base_loss(spec: ObjectiveSpec, logits: np.ndarray, labels: np.ndarray) -> LossResult:
    if spec.base == "ce":
        return cross_entropy(logits, labels)
    if spec.base == "focal":
        return focal_loss(logits, labels, spec.focal_gamma)
    return soft_dice(logits, labels)


def combined_objective(spec: ObjectiveSpec, logits: np.ndarray, labels: np.ndarray,
                       mask: np.ndarray | None = None) -> LossResult:
    """Base segmentation loss plus the configured regularizer.

    ``mask`` overrides the misclassified set (used to freeze it during
    finite-difference checks); it is ignored for ``confidence_penalty``.
    """
    result = base_loss(spec, logits, labels)
    if spec.regularizer == "none" or spec.weight == 0:
        return result
    probs = softmax_channels(logits)
    if spec.regularizer == "confidence_penalty":
        all_pixels = np.ones((probs.shape[0],) + probs.shape[2:], dtype=bool)
        return result + entropy_term(probs, all_pixels).scaled(-spec.beta)
    if mask is None:
        mask = misclassified_set(probs, labels).mask
    if spec.regularizer == "meep_h":
        return result + entropy_term(probs, mask).scaled(-spec.lam)
    return result + kl_uniform_term(probs, mask).scaled(spec.lam)
