"""Training, evaluation, post-hoc calibration and suite orchestration."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import posthoc
from .losses import ObjectiveSpec, combined_objective
from .metrics import CalibrationReport, EmptyMaskError, ReliabilityBins, calibration_report, dice_score, ece, hausdorff
from .seg_model import AdamState, ModelParams, adam_step, backward, forward, init_params, predict_probs, save_checkpoint
from .synthdata import BiasedPatchSampler, DatasetSplits, Split, TaskConfig, bayes_probs, generate
from .tensor_core import make_rng, sub_seed

log = logging.getLogger(__name__)

CSV_HEADER = "model,seed,dice,hd,brier,brier_plus,ece"
METRICS = ("dice", "hd", "brier", "brier_plus", "ece")
POSTHOC = ("none", "platt", "isotonic")

# lambda presets for sparse real-world masks (white-matter lesions, left atrium)
LAMBDA_PRESETS = {
    "wmh": {"ce": 0.3, "dice": 1.0},
    "la": {"ce": 0.1, "dice": 0.5},
}
LAMBDA_GRID = (0.1, 0.3, 0.5, 1.0)
# desk-scale defaults for the synthetic task, picked by validation ECE
DESK_LAMBDA = {"dice_h": 0.03, "dice_kl": 0.01, "ce_h": 0.03, "ce_kl": 0.01}


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-4
    decay: float = 0.85
    interval: int = 10


@dataclass
class ExperimentConfig:
    name: str = ""
    task: TaskConfig = field(default_factory=TaskConfig)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 40
    batch: int = 8
    patch: int | None = 32
    fg_prob: float = 0.5
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    posthoc: str = "none"
    ece_bins: int = 10
    output: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.posthoc not in POSTHOC:
            raise ValueError(f"posthoc must be one of {POSTHOC}, got {self.posthoc!r}")
        if not self.name:
            self.name = self.objective.label + ("" if self.posthoc == "none" else f"+{self.posthoc}")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.task.n_train // self.batch)

    def to_json(self) -> dict:
        return {
            "name": self.name, "task": self.task.to_json(), "objective": self.objective.to_json(),
            "optimizer": asdict(self.optimizer), "epochs": self.epochs, "batch": self.batch,
            "patch": self.patch, "fg_prob": self.fg_prob, "seeds": list(self.seeds),
            "posthoc": self.posthoc, "ece_bins": self.ece_bins, "output": self.output,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        task = TaskConfig.from_json(d.pop("task", {}))
        objective = ObjectiveSpec.from_json(d.pop("objective", {}))
        optimizer = OptimizerConfig(**d.pop("optimizer", {}))
        return cls(task=task, objective=objective, optimizer=optimizer, **d)

    def training_key(self) -> str:
        """Hash of everything that influences trained parameters (not seeds, posthoc or output)."""
        d = self.to_json()
        for k in ("name", "seeds", "posthoc", "ece_bins", "output"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        d = self.to_json()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def train(config: ExperimentConfig, seed: int, data: DatasetSplits | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[ModelParams, list[dict]]:
    """Train one model; returns the final-epoch parameters and the per-epoch history."""
    data = data or generate(config.task)
    params = init_params(2, make_rng(sub_seed(seed, 1)))
    opt = config.optimizer
    state = AdamState.for_params(params, base_lr=opt.base_lr, decay_factor=opt.decay, decay_interval=opt.interval)
    sampler = BiasedPatchSampler(data.train, config.patch, config.fg_prob)
    batch_rng = make_rng(sub_seed(seed, 2))
    history = []
    for epoch in range(config.epochs):
        state.epoch = epoch
        losses = []
        batches = sampler.epoch_batches(config.steps_per_epoch, config.batch, batch_rng)
        for step, (images, labels, _) in enumerate(batches):
            logits, cache = forward(params, images)
            loss = combined_objective(config.objective, logits, labels)
            if not math.isfinite(loss.value) or not np.all(np.isfinite(loss.grad_logits)):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            adam_step(params, backward(params, cache, loss.grad_logits), state)
            losses.append(loss.value)
        row = {"epoch": epoch + 1, "lr": state.effective_lr(epoch), "train_loss": float(np.mean(losses))}
        if len(data.val):
            pred = predict_probs(params, data.val.images).argmax(axis=1)
            row["val_dice"] = float(np.mean([dice_score(p, g) for p, g in zip(pred, data.val.labels)]))
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return params, history


@dataclass
class EvalResult:
    report: CalibrationReport
    dice_mean: float
    dice_std: float
    hd_mean: float
    hd_std: float
    per_image: list[dict]

    def row(self) -> dict:
        return {"dice": self.dice_mean, "hd": self.hd_mean, "brier": self.report.brier,
                "brier_plus": self.report.brier_plus, "ece": self.report.ece}

    def to_json(self) -> dict:
        return {**self.row(), "dice_std": self.dice_std, "hd_std": self.hd_std,
                "report": self.report.to_json(), "per_image": self.per_image}


def evaluate_probs(probs: np.ndarray, labels: np.ndarray, ece_bins: int = 10) -> EvalResult:
    """Pooled calibration metrics plus per-image Dice / Hausdorff.

    Hausdorff is undefined when either mask is empty; such images get
    ``hd = NaN`` and are excluded from the HD mean.
    """
    report = calibration_report(probs, labels, ece_bins)
    pred = probs.argmax(axis=1)
    per_image = []
    for i in range(len(pred)):
        try:
            hd = hausdorff(pred[i], labels[i])
        except EmptyMaskError:
            hd = float("nan")
        per_image.append({"dice": dice_score(pred[i], labels[i]), "hd": hd,
                          "ece": ece(probs[i:i + 1], labels[i:i + 1], ece_bins)[0]})
    dice = np.array([r["dice"] for r in per_image])
    hds = np.array([r["hd"] for r in per_image])
    hd_ok = hds[np.isfinite(hds)]
    return EvalResult(report, float(dice.mean()), float(dice.std()),
                      float(hd_ok.mean()) if hd_ok.size else float("nan"),
                      float(hd_ok.std()) if hd_ok.size else float("nan"), per_image)


def evaluate(model, split: Split, ece_bins: int = 10, calibrator=None) -> EvalResult:
    """Evaluate ``model`` (ModelParams or a callable images -> probs) on ``split``."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if isinstance(model, ModelParams):
        probs = predict_probs(model, split.images)
    else:
        probs = model(split)
    if calibrator is not None:
        probs = posthoc.apply_calibrator(calibrator, probs)
    return evaluate_probs(probs, split.labels, ece_bins)


def bayes_predictor(split: Split) -> np.ndarray:
    return bayes_probs(split)


def fit_posthoc(kind: str, params: ModelParams, val: Split, test: Split | None = None, seed: int = 0):
    """Fit a calibrator on ``val`` only. Refuses if ``val`` shares samples with ``test``."""
    if len(val) == 0:
        raise ValueError("post-hoc calibration needs a non-empty validation split")
    if test is not None and val.uids & test.uids:
        raise AssertionError("calibration split overlaps the evaluation split")
    return posthoc.fit_calibrator(kind, predict_probs(params, val.images), val.labels, seed)


# -- suite -----------------------------------------------------------------

def aggregate(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation per metric over the successful rows."""
    ok = [r for r in rows if r["status"] == "ok"]
    out = {}
    for m in METRICS:
        vals = np.array([r[m] for r in ok], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[m] = {"mean": float("nan"), "std": float("nan")}
        else:
            out[m] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    return out


def _same(a: float, b: float) -> bool:
    return (math.isnan(a) and math.isnan(b)) or a == b


@dataclass
class RunRecord:
    """All seeds of one configuration: per-seed rows, aggregate, histories and reports."""

    name: str
    config: ExperimentConfig
    rows: list[dict]
    aggregate: dict[str, dict[str, float]]
    histories: dict[int, list[dict]] = field(default_factory=dict)
    reports: dict[int, dict] = field(default_factory=dict)
    calibrators: dict[int, dict] = field(default_factory=dict)

    @classmethod
    def build(cls, config: ExperimentConfig, rows, histories=None, reports=None, calibrators=None) -> "RunRecord":
        return cls(config.name, config, rows, aggregate(rows), histories or {}, reports or {}, calibrators or {})

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    @property
    def ok_seeds(self) -> list[int]:
        return [r["seed"] for r in self.rows if r["status"] == "ok"]

    def pooled_report(self) -> CalibrationReport | None:
        """Test-set report pooled over seeds (bins and histogram summed)."""
        reps = [CalibrationReport.from_json(self.reports[s]) for s in self.ok_seeds if s in self.reports]
        if not reps:
            return None
        bins = ReliabilityBins.pooled([r.bins for r in reps])
        hist = np.sum([r.prob_histogram for r in reps], axis=0)
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in reps]))
        extras = {k: float(np.mean([r.extras[k] for r in reps])) for k in reps[0].extras}
        return CalibrationReport(mean("brier"), mean("brier_plus"), mean("ece"), bins, hist, extras)

    def mean_extra(self, key: str) -> float:
        vals = [CalibrationReport.from_json(self.reports[s]).extras[key] for s in self.ok_seeds if s in self.reports]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self) -> dict:
        return {
            "name": self.name, "config_hash": self.config_hash, "config": self.config.to_json(),
            "rows": self.rows, "aggregate": self.aggregate,
            "histories": {str(k): v for k, v in self.histories.items()},
            "reports": {str(k): v for k, v in self.reports.items()},
            "calibrators": {str(k): v for k, v in self.calibrators.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        config = ExperimentConfig.from_json(d["config"])
        if config.config_hash() != d["config_hash"]:
            raise ValueError(f"{d['name']}: config hash mismatch")
        rows = [{k: (float(v) if k in METRICS else v) for k, v in r.items()} for r in d["rows"]]
        rec = cls(d["name"], config, rows, d["aggregate"],
                  {int(k): v for k, v in d.get("histories", {}).items()},
                  {int(k): v for k, v in d.get("reports", {}).items()},
                  {int(k): v for k, v in d.get("calibrators", {}).items()})
        again = aggregate(rows)
        for m in METRICS:
            for stat in ("mean", "std"):
                if not _same(float(again[m][stat]), float(rec.aggregate[m][stat])):
                    raise ValueError(f"{rec.name}: stored aggregate {m}.{stat} does not match per-seed rows")
        return rec


def _fmt(v) -> str:
    return repr(float(v))


def results_csv(records: list[RunRecord]) -> str:
    """Comparison table: one row per (model, seed) then ``mean`` and ``std`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER.split(","))
    for rec in records:
        for r in rec.rows:
            if r["status"] == "ok":
                w.writerow([rec.name, r["seed"], *(_fmt(r[m]) for m in METRICS)])
            else:
                w.writerow([rec.name, r["seed"], *(["failed"] * len(METRICS))])
        for stat in ("mean", "std"):
            w.writerow([rec.name, stat, *(_fmt(rec.aggregate[m][stat]) for m in METRICS)])
    return buf.getvalue()


def parse_results_csv(text: str) -> list[dict]:
    """Inverse of :func:`results_csv`; metric cells become floats, failed cells ``None``."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if ",".join(header) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header!r}")
    out = []
    for row in reader:
        d = dict(zip(header, row))
        if d["seed"] not in ("mean", "std"):
            d["seed"] = int(d["seed"])
        for m in METRICS:
            d[m] = None if d[m] == "failed" else float(d[m])
        out.append(d)
    return out


def ensure_baselines(configs: list[ExperimentConfig]) -> list[ExperimentConfig]:
    """Append the un-regularised, uncalibrated baseline for every regularised config lacking one."""
    out = list(configs)
    have = {(c.objective.base, c.training_key()) for c in out if c.objective.regularizer == "none" and c.posthoc == "none"}
    for c in configs:
        if c.objective.regularizer == "none":
            continue
        base = replace(c, name="", posthoc="none",
                       objective=ObjectiveSpec(c.objective.base, focal_gamma=c.objective.focal_gamma))
        key = (base.objective.base, base.training_key())
        if key not in have:
            log.info("adding missing baseline %s for %s", base.name, c.name)
            out.append(base)
            have.add(key)
    return out


def default_suite(seeds=(0, 1, 2), task: TaskConfig | None = None, epochs: int = 40,
                  lambdas: dict[str, float] | None = None, **kw) -> list[ExperimentConfig]:
    """The comparison table rows: base losses, regularised variants and post-hoc baselines."""
    task = task or TaskConfig()
    lam = dict(DESK_LAMBDA if lambdas is None else lambdas)
    objectives = [
        ObjectiveSpec("dice"),
        ObjectiveSpec("dice", "meep_h", lam=lam["dice_h"]),
        ObjectiveSpec("dice", "meep_kl", lam=lam["dice_kl"]),
        ObjectiveSpec("dice", "confidence_penalty"),
        ObjectiveSpec("ce"),
        ObjectiveSpec("ce", "meep_h", lam=lam["ce_h"]),
        ObjectiveSpec("ce", "meep_kl", lam=lam["ce_kl"]),
        ObjectiveSpec("focal"),
    ]
    configs = [ExperimentConfig(task=task, objective=o, epochs=epochs, seeds=list(seeds), **kw) for o in objectives]
    configs += [ExperimentConfig(task=task, objective=ObjectiveSpec("dice"), epochs=epochs, seeds=list(seeds),
                                 posthoc=k, **kw) for k in ("platt", "isotonic")]
    return configs


def sweep_suite(base: str, regularizer: str, grid=LAMBDA_GRID, seeds=(0, 1, 2),
                task: TaskConfig | None = None, epochs: int = 40, **kw) -> list[ExperimentConfig]:
    """One config per lambda in ``grid`` plus the base-loss baseline."""
    if regularizer not in ("meep_h", "meep_kl"):
        raise ValueError("sweep mode takes meep_h or meep_kl")
    task = task or TaskConfig()
    configs = [ExperimentConfig(name=f"{base}+{regularizer}@{lam:g}", task=task, epochs=epochs, seeds=list(seeds),
                                objective=ObjectiveSpec(base, regularizer, lam=float(lam)), **kw) for lam in grid]
    return ensure_baselines(configs)


class _Trainer:
    """Trains each (training key, seed) once; post-hoc variants reuse the model."""

    def __init__(self, out: Path | None):
        self.out = out
        self.data: dict[str, DatasetSplits] = {}
        self.models: dict[tuple[str, int], tuple[ModelParams, list[dict]] | Exception] = {}

    def dataset(self, task: TaskConfig) -> DatasetSplits:
        key = json.dumps(task.to_json(), sort_keys=True)
        if key not in self.data:
            self.data[key] = generate(task)
        return self.data[key]

    def get(self, config: ExperimentConfig, seed: int) -> tuple[ModelParams, list[dict]]:
        key = (config.training_key(), seed)
        if key not in self.models:
            t0 = time.perf_counter()
            try:
                params, history = train(config, seed, self.dataset(config.task))
                self.models[key] = (params, history)
                if self.out is not None:
                    save_checkpoint(params, None, self.out / "checkpoints" / f"{key[0]}-seed{seed}")
                log.info("trained %s seed %d in %.1fs", config.name, seed, time.perf_counter() - t0)
            except Exception as exc:  # recorded, the suite continues
                log.error("training %s seed %d failed: %s", config.name, seed, exc)
                self.models[key] = exc
        got = self.models[key]
        if isinstance(got, Exception):
            raise got
        return got


def run_config(config: ExperimentConfig, trainer: _Trainer) -> RunRecord:
    rows, histories, reports, calibrators = [], {}, {}, {}
    for seed in config.seeds:
        try:
            params, history = trainer.get(config, seed)
            data = trainer.dataset(config.task)
            calibrator = None
            if config.posthoc != "none":
                calibrator = fit_posthoc(config.posthoc, params, data.val, data.test, seed)
                calibrators[seed] = calibrator.to_json()
            result = evaluate(params, data.test, config.ece_bins, calibrator)
        except AssertionError:
            raise
        except Exception as exc:
            rows.append({"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append({"seed": seed, "status": "ok", **result.row(), "dice_std": result.dice_std,
                     "hd_std": result.hd_std})
        histories[seed] = history
        reports[seed] = result.report.to_json()
    return RunRecord.build(config, rows, histories, reports, calibrators)


def write_results(records: list[RunRecord], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(records))
    with open(out / "results.json", "w") as fh:
        json.dump({"format": "meep-results/1", "records": [r.to_json() for r in records]}, fh, indent=1)
    return out


def load_results(out_dir) -> list[RunRecord]:
    with open(Path(out_dir) / "results.json") as fh:
        doc = json.load(fh)
    return [RunRecord.from_json(d) for d in doc["records"]]


def run_suite(configs: list[ExperimentConfig], out_dir=None, render: bool = True) -> list[RunRecord]:
    """Train, calibrate and evaluate every (config, seed); write CSV, JSON, plots and checkpoints."""
    if not configs:
        raise ValueError("run_suite needs at least one config")
    configs = ensure_baselines(configs)
    names = [c.name for c in configs]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ValueError(f"duplicate config names: {sorted(dup)}")
    out = Path(out_dir) if out_dir is not None else None
    trainer = _Trainer(out)
    records = [run_config(c, trainer) for c in configs]
    if out is not None:
        write_results(records, out)
        if render:
            from .plots import render_reports
            render_reports(records, out)
    return records


def suite_from_json(d: dict) -> list[ExperimentConfig]:
    """Build a suite from ``{"configs": [...]}``, ``{"suite": "default", ...}`` or ``{"sweep": {...}, ...}``."""
    d = dict(d)
    if "configs" in d:
        return [ExperimentConfig.from_json(c) for c in d["configs"]]
    common = {}
    if "task" in d:
        common["task"] = TaskConfig.from_json(d["task"])
    for k in ("seeds", "epochs"):
        if k in d:
            common[k] = d[k]
    extra = {k: d[k] for k in ("batch", "patch", "fg_prob", "ece_bins") if k in d}
    if "optimizer" in d:
        extra["optimizer"] = OptimizerConfig(**d["optimizer"])
    if "sweep" in d:
        s = d["sweep"]
        return sweep_suite(s["base"], s["regularizer"], s.get("grid", LAMBDA_GRID), **common, **extra)
    if d.get("suite", "default") != "default":
        raise ValueError(f"unknown suite {d['suite']!r}")
    lambdas = d.get("lambdas")
    if isinstance(lambdas, str):
        p = LAMBDA_PRESETS[lambdas]
        lambdas = {"dice_h": p["dice"], "dice_kl": p["dice"], "ce_h": p["ce"], "ce_kl": p["ce"]}
    return default_suite(lambdas=lambdas, **common, **extra)
