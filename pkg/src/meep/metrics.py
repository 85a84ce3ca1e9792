"""Segmentation and calibration metrics for binary (K = 2) probability maps.

Binning convention shared by reliability bins and probability histograms:
bin 0 covers ``[0, 1/M]`` and bin ``m > 0`` covers ``(m/M, (m+1)/M]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EmptyMaskError(ValueError):
    pass


class UnsupportedClassCountError(ValueError):
    pass


def bin_index(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin index per value under the left-closed-first, right-closed-rest convention."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    inner = np.arange(1, n_bins) / n_bins
    return np.searchsorted(inner, np.asarray(values, dtype=np.float64), side="left")


@dataclass
class ReliabilityBins:
    counts: np.ndarray
    mean_confidence: np.ndarray  # NaN for empty bins
    accuracy: np.ndarray  # NaN for empty bins

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) / self.n_bins

    def to_json(self) -> list[dict]:
        out = []
        for m in range(self.n_bins):
            c = int(self.counts[m])
            out.append({
                "lo": m / self.n_bins, "hi": (m + 1) / self.n_bins, "count": c,
                "confidence": float(self.mean_confidence[m]) if c else None,
                "accuracy": float(self.accuracy[m]) if c else None,
            })
        return out

    @classmethod
    def from_json(cls, rows: list[dict]) -> "ReliabilityBins":
        counts = np.array([r["count"] for r in rows], dtype=np.int64)
        conf = np.array([np.nan if r["confidence"] is None else r["confidence"] for r in rows])
        acc = np.array([np.nan if r["accuracy"] is None else r["accuracy"] for r in rows])
        return cls(counts, conf, acc)

    @classmethod
    def pooled(cls, bins: list["ReliabilityBins"]) -> "ReliabilityBins":
        """Count-weighted merge of several bin sets with the same M."""
        counts = sum(b.counts for b in bins)
        conf_sum = sum(np.nan_to_num(b.mean_confidence) * b.counts for b in bins)
        acc_sum = sum(np.nan_to_num(b.accuracy) * b.counts for b in bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), np.nan)
            acc = np.where(counts > 0, acc_sum / np.maximum(counts, 1), np.nan)
        return cls(counts, conf, acc)


@dataclass
class CalibrationReport:
    brier: float
    brier_plus: float
    ece: float
    bins: ReliabilityBins
    prob_histogram: np.ndarray
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"brier": self.brier, "brier_plus": self.brier_plus, "ece": self.ece,
                "bins": self.bins.to_json(), "prob_histogram": [int(c) for c in self.prob_histogram],
                **self.extras}

    @classmethod
    def from_json(cls, d: dict) -> "CalibrationReport":
        core = {"brier", "brier_plus", "ece", "bins", "prob_histogram"}
        return cls(d["brier"], d["brier_plus"], d["ece"], ReliabilityBins.from_json(d["bins"]),
                   np.array(d["prob_histogram"], dtype=np.int64),
                   {k: v for k, v in d.items() if k not in core})


def _fg_channel(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 2 or probs.shape[1] != 2:
        raise UnsupportedClassCountError(f"binary [B, 2, ...] probabilities required, got {probs.shape}")
    return probs[:, 1]


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int = 1) -> float:
    """Hard Dice overlap for one class; 1.0 when both masks are empty."""
    p = np.asarray(pred) == class_id
    g = np.asarray(gt) == class_id
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground pixels touching background (4-neighbourhood) or the image edge."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def hausdorff(pred: np.ndarray, gt: np.ndarray, class_id: int = 1) -> float:
    """Symmetric Hausdorff distance (max, not 95th percentile) between 2-D boundary sets."""
    p = np.asarray(pred) == class_id
    g = np.asarray(gt) == class_id
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        raise EmptyMaskError(f"class {class_id} absent from {'prediction' if not p.any() else 'ground truth'}")
    a = boundary_pixels(p).astype(np.float64)
    b = boundary_pixels(g).astype(np.float64)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sqrt(max(d2.min(axis=1).max(), d2.min(axis=0).max())))


def brier(probs: np.ndarray, gt: np.ndarray) -> float:
    fg = _fg_channel(probs)
    y = (np.asarray(gt) == 1).astype(np.float64)
    return float(((fg - y) ** 2).mean())


def brier_plus(probs: np.ndarray, gt: np.ndarray) -> float:
    """Brier score over the positive stratum only."""
    fg = _fg_channel(probs)
    pos = np.asarray(gt) == 1
    if not pos.any():
        raise EmptyMaskError("stratified Brier needs at least one foreground pixel")
    return float(((fg[pos] - 1.0) ** 2).mean())


def ece(probs: np.ndarray, gt: np.ndarray, n_bins: int = 10) -> tuple[float, ReliabilityBins]:
    """Expected calibration error on max-class confidence with argmax correctness."""
    probs = np.asarray(probs, dtype=np.float64)
    conf = probs.max(axis=1).ravel()
    correct = (np.argmax(probs, axis=1) == np.asarray(gt)).ravel().astype(np.float64)
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    nz = counts > 0
    mean_conf = np.full(n_bins, np.nan)
    acc = np.full(n_bins, np.nan)
    mean_conf[nz] = conf_sum[nz] / counts[nz]
    acc[nz] = acc_sum[nz] / counts[nz]
    n = conf.size
    value = 0.0
    for m in np.flatnonzero(nz):  # fixed summation order
        value += counts[m] / n * abs(acc[m] - mean_conf[m])
    return float(value), ReliabilityBins(counts, mean_conf, acc)


def prob_histogram(probs: np.ndarray, n_bins: int = 10) -> np.ndarray:
    """Counts of foreground probability per bin."""
    if n_bins < 2:
        raise ValueError("histogram needs at least two bins")
    fg = _fg_channel(probs).ravel()
    return np.bincount(bin_index(fg, n_bins), minlength=n_bins)


def mid_fraction(probs: np.ndarray, lo: float = 0.1, hi: float = 0.9) -> float:
    """Fraction of foreground probabilities strictly inside ``(lo, hi)``."""
    fg = _fg_channel(probs)
    return float(((fg > lo) & (fg < hi)).mean())


def calibration_report(probs: np.ndarray, gt: np.ndarray, n_bins: int = 10) -> CalibrationReport:
    e, bins = ece(probs, gt, n_bins)
    gt = np.asarray(gt)
    bp = brier_plus(probs, gt) if (gt == 1).any() else float("nan")
    return CalibrationReport(brier(probs, gt), bp, e, bins, prob_histogram(probs, max(n_bins, 2)),
                             {"mid_fraction": mid_fraction(probs)})
