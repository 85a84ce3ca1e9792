"""Seeded 2-D segmentation task whose true posterior P(y=1 | f) is known.

Each image carries a latent field ``f`` built from 1-3 smooth blobs, each blob
a sum of one or two axis-aligned Gaussian bumps. Then::

    posterior = sigmoid(f / ambiguity_tau)
    label     ~ Bernoulli(posterior)
    image     = f + N(0, noise_sigma^2)

Every image has its own sub-seed derived from ``(seed, split, index)`` so
generation order does not matter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .metrics import CalibrationReport, calibration_report
from .tensor_core import load_tensor, make_rng, save_tensor, sub_seed

SPLITS = ("train", "val", "test")
FIELD_GAIN = 4.0  # f spans roughly [-2, 2]; object boundary at the 0 level set


@dataclass
class TaskConfig:
    height: int = 64
    width: int = 64
    n_train: int = 200
    n_val: int = 24
    n_test: int = 60
    noise_sigma: float = 0.5
    ambiguity_tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"images must be at least 16x16, got {self.height}x{self.width}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.ambiguity_tau > 0:
            raise ValueError("ambiguity_tau must be > 0")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be >= 0")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TaskConfig":
        return cls(**d)


@dataclass
class SynthSample:
    image: np.ndarray  # [1, H, W] float64
    label: np.ndarray  # [H, W] uint8
    posterior: np.ndarray  # [H, W] float64, true P(y=1)
    uid: tuple[str, int] = ("", -1)


@dataclass
class Split:
    name: str
    samples: list[SynthSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.samples])

    @property
    def posteriors(self) -> np.ndarray:
        return np.stack([s.posterior for s in self.samples])

    @property
    def uids(self) -> set[tuple[str, int]]:
        return {s.uid for s in self.samples}


@dataclass
class DatasetSplits:
    config: TaskConfig
    train: Split
    val: Split
    test: Split

    def __getitem__(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def latent_field(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    g = np.zeros((h, w))
    short = min(h, w)
    for _ in range(rng.integers(1, 4)):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        for _ in range(rng.integers(1, 3)):
            sy = rng.uniform(0.06, 0.16) * short
            sx = rng.uniform(0.06, 0.16) * short
            by = cy + rng.normal(0, 0.5) * sy
            bx = cx + rng.normal(0, 0.5) * sx
            g += np.exp(-0.5 * (((yy - by) / sy) ** 2 + ((xx - bx) / sx) ** 2))
    return FIELD_GAIN * (np.minimum(g, 1.0) - 0.5)


def make_sample(config: TaskConfig, split: str, index: int) -> SynthSample:
    rng = make_rng(sub_seed(config.seed, SPLITS.index(split), index))
    f = latent_field(config.height, config.width, rng)
    posterior = expit(f / config.ambiguity_tau)
    label = (rng.random(f.shape) < posterior).astype(np.uint8)
    image = f + rng.normal(0.0, config.noise_sigma, size=f.shape) if config.noise_sigma > 0 else f.copy()
    return SynthSample(image[None], label, posterior, (split, index))


def generate(config: TaskConfig) -> DatasetSplits:
    splits = {name: Split(name, [make_sample(config, name, i) for i in range(config.split_size(name))])
              for name in SPLITS}
    return DatasetSplits(config, **splits)


class NoForegroundError(ValueError):
    pass


class BiasedPatchSampler:
    """Draws training patches whose centre pixel is foreground with probability ``fg_prob``.

    A forced-foreground draw is mixed with a uniform draw so that the overall
    centre-foreground rate equals ``fg_prob``; when ``fg_prob`` does not exceed
    the split's base rate the sampler is plain uniform.

    A patch of size ``P`` has its centre at offset ``P // 2``; only centres
    that keep the patch inside the image are eligible. With ``patch=None``
    whole images are drawn and the centre is the image centre.
    """

    def __init__(self, split: Split, patch: int | None, fg_prob: float):
        if not 0.0 <= fg_prob <= 1.0:
            raise ValueError(f"fg_prob must lie in [0, 1], got {fg_prob}")
        if len(split) == 0:
            raise ValueError("cannot sample from an empty split")
        self.split = split
        self.fg_prob = fg_prob
        labels = split.labels
        n, h, w = labels.shape
        if patch is not None and (patch > h or patch > w or patch < 3):
            raise ValueError(f"patch {patch} does not fit {h}x{w} images")
        self.patch = patch
        if patch is None:
            self.lo = (h // 2, w // 2)
            self.hi = (h // 2 + 1, w // 2 + 1)
        else:
            half = patch // 2
            self.lo = (half, half)
            self.hi = (h - patch + half + 1, w - patch + half + 1)
        region = labels[:, self.lo[0]:self.hi[0], self.lo[1]:self.hi[1]]
        self.region_shape = region.shape
        self.fg_flat = np.flatnonzero(region.ravel() == 1)
        self.base_rate = float(region.mean())
        if fg_prob > 0 and self.fg_flat.size == 0:
            raise NoForegroundError("no eligible foreground centre in split while fg_prob > 0")
        b = self.base_rate
        self.force_prob = 1.0 if b >= 1.0 else max(0.0, (fg_prob - b) / (1.0 - b))

    def draw_centres(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """``[batch, 3]`` array of (image, row, col) centre coordinates."""
        use_fg = rng.random(batch) < self.force_prob
        n_region = int(np.prod(self.region_shape))
        uniform = rng.integers(0, n_region, size=batch)
        fg_pick = self.fg_flat[rng.integers(0, max(self.fg_flat.size, 1), size=batch)] if self.fg_flat.size else uniform
        flat = np.where(use_fg, fg_pick, uniform)
        i, r, c = np.unravel_index(flat, self.region_shape)
        return np.stack([i, r + self.lo[0], c + self.lo[1]], axis=1)

    @property
    def shuffles_epochs(self) -> bool:
        """Whole-image mode without forcing walks a fresh permutation every epoch."""
        return self.patch is None and self.force_prob == 0.0

    def epoch_batches(self, steps: int, batch: int, rng: np.random.Generator):
        """Yield ``steps`` batches ``(images, labels, centres)`` for one epoch."""
        if self.shuffles_epochs and steps * batch <= len(self.split):
            order = rng.permutation(len(self.split))
            h, w = self.lo
            for k in range(steps):
                idx = order[k * batch:(k + 1) * batch]
                centres = np.stack([idx, np.full_like(idx, h), np.full_like(idx, w)], axis=1)
                yield self.split.images[idx], self.split.labels[idx], centres
            return
        for _ in range(steps):
            yield self.sample(batch, rng)

    def sample(self, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        centres = self.draw_centres(batch, rng)
        if self.patch is None:
            idx = centres[:, 0]
            return self.split.images[idx], self.split.labels[idx], centres
        half = self.patch // 2
        imgs, labs = [], []
        for i, r, c in centres:
            s = self.split.samples[i]
            r0, c0 = r - half, c - half
            imgs.append(s.image[:, r0:r0 + self.patch, c0:c0 + self.patch])
            labs.append(s.label[r0:r0 + self.patch, c0:c0 + self.patch])
        return np.stack(imgs), np.stack(labs), centres


def biased_batch_sampler(split: Split, batch: int, fg_prob: float, rng: np.random.Generator,
                         patch: int | None = None):
    """One-shot convenience wrapper around :class:`BiasedPatchSampler`."""
    return BiasedPatchSampler(split, patch, fg_prob).sample(batch, rng)


def bayes_probs(split: Split) -> np.ndarray:
    post = split.posteriors
    return np.stack([1.0 - post, post], axis=1)


def bayes_reference_report(split: Split, ece_bins: int = 10) -> CalibrationReport:
    """Calibration of the true posterior used as a predictor."""
    if len(split) == 0:
        raise ValueError("empty split")
    return calibration_report(bayes_probs(split), split.labels, ece_bins)


def save_dataset(data: DatasetSplits, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in SPLITS:
        split = data[name]
        if len(split) == 0:
            continue
        save_tensor(split.images, d / f"{name}_image.sgt")
        save_tensor(split.labels, d / f"{name}_label.sgt", dtype="u8")
        save_tensor(split.posteriors, d / f"{name}_posterior.sgt")
        files[name] = {"image": f"{name}_image.sgt", "label": f"{name}_label.sgt",
                       "posterior": f"{name}_posterior.sgt", "count": len(split)}
    with open(d / "manifest.json", "w") as fh:
        json.dump({"format": "meep-dataset/1", "task": data.config.to_json(), "splits": files}, fh, indent=2)
    return d


def load_dataset(directory) -> DatasetSplits:
    d = Path(directory)
    with open(d / "manifest.json") as fh:
        manifest = json.load(fh)
    config = TaskConfig.from_json(manifest["task"])
    splits = {}
    for name in SPLITS:
        entry = manifest["splits"].get(name)
        if entry is None:
            splits[name] = Split(name)
            continue
        imgs = load_tensor(d / entry["image"])
        labs = load_tensor(d / entry["label"])
        post = load_tensor(d / entry["posterior"])
        splits[name] = Split(name, [SynthSample(imgs[i], labs[i], post[i], (name, i)) for i in range(len(imgs))])
    return DatasetSplits(config, **splits)
