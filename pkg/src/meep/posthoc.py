"""Platt scaling and isotonic regression fitted on held-out validation pixels.

Platt works on the foreground logit margin ``ln p_fg - ln p_bg``; isotonic
regression works directly on ``p_fg``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor_core import make_rng, safe_log

log = logging.getLogger(__name__)

PLATT_L2 = 1e-6
MAX_FIT_PIXELS = 200_000


@dataclass
class PlattParams:
    a: float
    b: float
    converged: bool = True
    n_iter: int = 0

    def to_json(self) -> dict:
        return {"kind": "platt", "a": self.a, "b": self.b, "converged": self.converged, "n_iter": self.n_iter}

    @classmethod
    def from_json(cls, d: dict) -> "PlattParams":
        return cls(float(d["a"]), float(d["b"]), bool(d.get("converged", True)), int(d.get("n_iter", 0)))


@dataclass
class IsotonicModel:
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.thresholds.shape != self.values.shape or self.thresholds.size == 0:
            raise ValueError("thresholds and values must be non-empty and equally long")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if np.any(np.diff(self.values) < 0):
            raise ValueError("fitted values must be non-decreasing")

    def to_json(self) -> dict:
        return {"kind": "isotonic", "thresholds": self.thresholds.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "IsotonicModel":
        return cls(np.array(d["thresholds"]), np.array(d["values"]))


def logit_margin(probs: np.ndarray) -> np.ndarray:
    """``ln p_fg - ln p_bg`` per pixel for ``[B, 2, ...]`` maps."""
    if probs.shape[1] != 2:
        raise ValueError(f"binary probabilities required, got {probs.shape}")
    return safe_log(probs[:, 1]) - safe_log(probs[:, 0])


def _platt_objective(a, b, s, y, l2):
    z = a * s + b
    # mean softplus(z) - y z, stable form
    nll = np.mean(np.logaddexp(0.0, z) - y * z)
    return nll + l2 * (a * a + b * b)


def platt_fit(scores, labels, l2: float = PLATT_L2, max_iter: int = 100, tol: float = 1e-8) -> PlattParams:
    """Newton's method with backtracking on the penalized mean NLL of ``sigmoid(a s + b)``."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise ValueError("Platt fitting needs both classes in the labels")
    n = s.size
    a, b = 1.0, 0.0
    f = _platt_objective(a, b, s, y, l2)
    for it in range(1, max_iter + 1):
        p = expit(a * s + b)
        r = p - y
        g = np.array([np.dot(r, s) / n + 2 * l2 * a, r.mean() + 2 * l2 * b])
        if np.hypot(*g) < tol:
            return PlattParams(float(a), float(b), True, it - 1)
        w = p * (1 - p)
        h = np.array([[np.dot(w, s * s) / n + 2 * l2, np.dot(w, s) / n],
                      [np.dot(w, s) / n, w.mean() + 2 * l2]])
        step = np.linalg.solve(h, g)
        t = 1.0
        while True:
            na, nb = a - t * step[0], b - t * step[1]
            nf = _platt_objective(na, nb, s, y, l2)
            if nf <= f - 1e-4 * t * np.dot(g, step) or t < 1e-10:
                break
            t *= 0.5
        a, b, f = na, nb, nf
    p = expit(a * s + b)
    r = p - y
    gnorm = math.hypot(np.dot(r, s) / n + 2 * l2 * a, r.mean() + 2 * l2 * b)
    if gnorm < tol:
        return PlattParams(float(a), float(b), True, max_iter)
    log.warning("Platt fit did not converge after %d iterations (|grad|=%.3g)", max_iter, gnorm)
    return PlattParams(float(a), float(b), False, max_iter)


def platt_apply(params: PlattParams, probs: np.ndarray) -> np.ndarray:
    fg = expit(params.a * logit_margin(probs) + params.b)
    return np.stack([1.0 - fg, fg], axis=1)


def pava(y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit to ``y`` (already in score order)."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    means: list[float] = []
    weights: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y, w):
        means.append(float(yi))
        weights.append(float(wi))
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            wt = weights[-1] + w2
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / wt
            weights[-1] = wt
            sizes[-1] += s2
    return np.repeat(means, sizes)


def isotonic_fit(scores, labels) -> IsotonicModel:
    """Isotonic regression of labels on scores; tied scores are pooled before PAVA."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.size < 2 or s.shape != y.shape:
        raise ValueError("isotonic fit needs at least two (score, label) pairs of equal length")
    uniq, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y)
    fitted = pava(sums / counts, counts.astype(np.float64))
    return IsotonicModel(uniq, np.clip(fitted, 0.0, 1.0))


def isotonic_lookup(model: IsotonicModel, scores: np.ndarray) -> np.ndarray:
    """Right-continuous step function; clamps to the end values outside the fitted range."""
    idx = np.searchsorted(model.thresholds, scores, side="right") - 1
    return model.values[np.clip(idx, 0, len(model.values) - 1)]


def isotonic_apply(model: IsotonicModel, probs: np.ndarray) -> np.ndarray:
    if probs.shape[1] != 2:
        raise ValueError(f"binary probabilities required, got {probs.shape}")
    fg = isotonic_lookup(model, probs[:, 1])
    return np.stack([1.0 - fg, fg], axis=1)


def subsample(scores: np.ndarray, labels: np.ndarray, seed: int, max_n: int = MAX_FIT_PIXELS):
    """Deterministic uniform subsample of at most ``max_n`` pixels."""
    s = np.asarray(scores).ravel()
    y = np.asarray(labels).ravel()
    if s.size <= max_n:
        return s, y
    idx = np.sort(make_rng(seed).choice(s.size, size=max_n, replace=False))
    return s[idx], y[idx]


def fit_calibrator(kind: str, val_probs: np.ndarray, val_labels: np.ndarray, seed: int = 0):
    """Fit ``platt`` or ``isotonic`` on validation probabilities."""
    y = (np.asarray(val_labels) == 1).astype(np.float64)
    if kind == "platt":
        s, yy = subsample(logit_margin(val_probs), y, seed)
        return platt_fit(s, yy)
    if kind == "isotonic":
        s, yy = subsample(val_probs[:, 1], y, seed)
        return isotonic_fit(s, yy)
    raise ValueError(f"unknown calibrator {kind!r}")


def apply_calibrator(model, probs: np.ndarray) -> np.ndarray:
    if isinstance(model, PlattParams):
        return platt_apply(model, probs)
    if isinstance(model, IsotonicModel):
        return isotonic_apply(model, probs)
    raise TypeError(f"not a calibrator: {type(model).__name__}")


def calibrator_from_json(d: dict):
    if d.get("kind") == "platt":
        return PlattParams.from_json(d)
    if d.get("kind") == "isotonic":
        return IsotonicModel.from_json(d)
    raise ValueError(f"unknown calibrator kind {d.get('kind')!r}")
