import json
import math

import numpy as np
import pytest

from meep import cli, losses, runner as R
from meep.losses import ObjectiveSpec
from meep.metrics import calibration_report, prob_histogram
from meep.plots import read_bars, reliability_svg
from meep.synthdata import TaskConfig, bayes_reference_report, generate

TINY = TaskConfig(n_train=8, n_val=4, n_test=4)


def smoke_config(objective=None, **kw):
    kw.setdefault("patch", None)
    kw.setdefault("fg_prob", 0.0)
    return R.ExperimentConfig(task=TINY, objective=objective or ObjectiveSpec("ce"), epochs=2, **kw)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(TINY)


@pytest.fixture(scope="module")
def tiny_suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    configs = R.default_suite(seeds=(0, 1), task=TINY, epochs=1)
    return out, R.run_suite(configs, out)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_smoke_training_reduces_ce(seed, tiny_data):
    _, hist = R.train(smoke_config(), seed, tiny_data)
    assert hist[1]["train_loss"] < hist[0]["train_loss"]
    assert [r["epoch"] for r in hist] == [1, 2]
    assert hist[0]["lr"] == 1e-4 and 0 <= hist[0]["val_dice"] <= 1


def test_same_seed_same_history(tiny_data):
    cfg = smoke_config(patch=32, fg_prob=0.5)
    p1, h1 = R.train(cfg, 3, tiny_data)
    p2, h2 = R.train(cfg, 3, tiny_data)
    assert h1 == h2
    for (_, a), (_, b) in zip(p1.named_tensors(), p2.named_tensors()):
        assert a.tobytes() == b.tobytes()


def test_zero_lambda_is_bitwise_base(tiny_data):
    base, _ = R.train(smoke_config(ObjectiveSpec("dice"), patch=32, fg_prob=0.5), 0, tiny_data)
    kl0, _ = R.train(smoke_config(ObjectiveSpec("dice", "meep_kl", lam=0.0), patch=32, fg_prob=0.5), 0, tiny_data)
    for (_, a), (_, b) in zip(base.named_tensors(), kl0.named_tensors()):
        assert a.tobytes() == b.tobytes()


def test_training_key_ignores_posthoc_and_seeds():
    a = R.ExperimentConfig(objective=ObjectiveSpec("dice"), posthoc="platt", seeds=[5])
    b = R.ExperimentConfig(objective=ObjectiveSpec("dice"))
    assert a.training_key() == b.training_key() and a.config_hash() != b.config_hash()
    assert R.ExperimentConfig.from_json(a.to_json()) == a
    with pytest.raises(ValueError):
        R.ExperimentConfig(seeds=[])
    with pytest.raises(ValueError):
        R.ExperimentConfig(epochs=0)


def test_nonfinite_loss_aborts_with_context(tiny_data, monkeypatch):
    def bad(spec, logits, labels, mask=None):
        return losses.LossResult(float("nan"), np.zeros_like(logits))
    monkeypatch.setattr(R, "combined_objective", bad)
    with pytest.raises(R.TrainingDivergedError, match="epoch 1, step 1"):
        R.train(smoke_config(), 0, tiny_data)


def test_bayes_evaluation_matches_reference(tiny_data):
    res = R.evaluate(R.bayes_predictor, tiny_data.test, 10)
    ref = bayes_reference_report(tiny_data.test, 10)
    assert res.report.to_json() == ref.to_json()


def test_all_background_predictor(tiny_data):
    labels = tiny_data.test.labels
    probs = np.zeros((len(labels), 2) + labels.shape[1:])
    probs[:, 0] = 1.0
    res = R.evaluate(lambda split: probs, tiny_data.test)
    assert res.dice_mean == 0.0
    assert res.report.brier == pytest.approx(labels.mean(), rel=1e-14)
    assert math.isnan(res.hd_mean)


def test_report_row_csv_roundtrip(tiny_data):
    rng = np.random.default_rng(0)
    fg = rng.random((2, 8, 8))
    res = R.evaluate_probs(np.stack([1 - fg, fg], axis=1), (rng.random((2, 8, 8)) < fg).astype(np.uint8))
    rows = [{"seed": 4, "status": "ok", **res.row()}]
    rec = R.RunRecord.build(R.ExperimentConfig(name="m"), rows)
    parsed = R.parse_results_csv(R.results_csv([rec]))
    assert parsed[0]["seed"] == 4
    for m in R.METRICS:
        assert parsed[0][m] == res.row()[m]


def test_aggregate_is_exact_mean_and_checked_on_load():
    rows = [{"seed": s, "status": "ok", **{m: v for m in R.METRICS}} for s, v in ((0, 0.1), (1, 0.2), (2, 0.4))]
    rows.append({"seed": 3, "status": "failed", "error": "x"})
    rec = R.RunRecord.build(R.ExperimentConfig(name="m"), rows)
    assert rec.aggregate["ece"]["mean"] == float(np.mean([0.1, 0.2, 0.4]))
    assert rec.aggregate["ece"]["std"] == float(np.std([0.1, 0.2, 0.4], ddof=1))
    doc = json.loads(json.dumps(rec.to_json()))
    assert R.RunRecord.from_json(doc).aggregate == rec.aggregate
    doc["aggregate"]["dice"]["mean"] += 1e-9
    with pytest.raises(ValueError, match="aggregate"):
        R.RunRecord.from_json(doc)


def test_posthoc_refuses_overlapping_splits(tiny_data):
    params, _ = R.train(smoke_config(), 0, tiny_data)
    with pytest.raises(AssertionError):
        R.fit_posthoc("platt", params, tiny_data.val, tiny_data.val)
    cal = R.fit_posthoc("isotonic", params, tiny_data.val, tiny_data.test)
    assert cal.to_json()["kind"] == "isotonic"


def test_default_suite_rows_and_baselines():
    names = [c.name for c in R.default_suite()]
    assert names == ["dice", "dice+meep_h", "dice+meep_kl", "dice+confidence_penalty", "ce", "ce+meep_h",
                     "ce+meep_kl", "focal", "dice+platt", "dice+isotonic"]
    only = R.ensure_baselines([R.ExperimentConfig(objective=ObjectiveSpec("ce", "meep_h", lam=0.3))])
    assert [c.name for c in only] == ["ce+meep_h", "ce"]


def test_sweep_mode_accepts_grid():
    cfgs = R.sweep_suite("dice", "meep_kl")
    assert [c.objective.lam for c in cfgs[:4]] == list(R.LAMBDA_GRID)
    assert cfgs[-1].name == "dice"
    from_json = R.suite_from_json({"sweep": {"base": "ce", "regularizer": "meep_h"}, "epochs": 3})
    assert len(from_json) == 5 and all(c.epochs == 3 for c in from_json)


def test_suite_outputs(tiny_suite):
    out, records = tiny_suite
    text = (out / "results.csv").read_text()
    assert text.splitlines()[0] == R.CSV_HEADER
    parsed = R.parse_results_csv(text)
    assert len(parsed) == len(records) * 4  # 2 seeds + mean + std
    for rec in records:
        per_seed = [p for p in parsed if p["model"] == rec.name and isinstance(p["seed"], int)]
        mean = next(p for p in parsed if p["model"] == rec.name and p["seed"] == "mean")
        assert mean["dice"] == float(np.mean([p["dice"] for p in per_seed]))
        assert (out / f"reliability_{rec.name}.svg").exists() and (out / f"hist_{rec.name}.svg").exists()
    for rec in records:
        mids = [rec.reports[s]["mid_fraction"] for s in rec.ok_seeds]
        assert rec.mean_extra("mid_fraction") == float(np.mean(mids))
    back = R.load_results(out)
    assert [r.name for r in back] == [r.name for r in records]
    assert any((out / "checkpoints").iterdir())


def test_failed_run_is_marked_and_suite_continues(tmp_path, monkeypatch):
    real = R.train

    def flaky(config, seed, data=None, on_epoch=None):
        if config.objective.base == "focal":
            raise R.TrainingDivergedError("boom")
        return real(config, seed, data, on_epoch)
    monkeypatch.setattr(R, "train", flaky)
    cfgs = [smoke_config(ObjectiveSpec("focal"), seeds=[0]), smoke_config(ObjectiveSpec("ce"), seeds=[0])]
    records = R.run_suite(cfgs, tmp_path)
    assert records[0].rows[0]["status"] == "failed" and records[1].rows[0]["status"] == "ok"
    rows = R.parse_results_csv((tmp_path / "results.csv").read_text())
    assert rows[0]["dice"] is None and math.isnan(rows[1]["dice"])


def test_reliability_svg_of_calibrated_record():
    # every pixel in a bin is correct at exactly the bin's confidence rate
    fg, gt = [], []
    for c in (0.55, 0.65, 0.75, 0.85, 0.95):
        n_fg = int(round(c * 20))
        fg += [c] * 20
        gt += [1] * n_fg + [0] * (20 - n_fg)
    fg, gt = np.array([fg]), np.array([gt])
    rep = calibration_report(np.stack([1 - fg, fg], axis=1), gt, 10)
    bars = [b for b in read_bars(reliability_svg("calibrated", rep)) if int(b["count"]) > 0]
    assert len(bars) == 5
    for b in bars:
        assert float(b["accuracy"]) == pytest.approx(float(b["confidence"]), abs=1e-12)
    assert "<script" not in reliability_svg("calibrated", rep)


def test_histogram_svg_counts_match(tiny_suite):
    out, records = tiny_suite
    rec = records[0]
    counts = [int(b["count"]) for b in read_bars((out / f"hist_{rec.name}.svg").read_text())]
    assert counts == rec.pooled_report().prob_histogram.tolist()
    # a single-seed record reproduces prob_histogram of its predictions directly
    from meep.plots import render_reports
    rng = np.random.default_rng(9)
    fg = rng.random((3, 8, 8)) ** 3
    probs = np.stack([1 - fg, fg], axis=1)
    rep = calibration_report(probs, (rng.random(fg.shape) < fg).astype(np.uint8), 10)
    one = R.RunRecord.build(R.ExperimentConfig(name="one", seeds=[0]),
                            [{"seed": 0, "status": "ok", **{m: 0.0 for m in R.METRICS}}], reports={0: rep.to_json()})
    render_reports([one], out / "single")
    counts = [int(b["count"]) for b in read_bars((out / "single" / "hist_one.svg").read_text())]
    assert counts == prob_histogram(probs, 10).tolist()


def test_render_unwritable_dir(tiny_suite, tmp_path):
    from meep.plots import render_reports
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        render_reports(tiny_suite[1], blocker / "sub")


# -- CLI -------------------------------------------------------------------

def run_cli(args, capsys):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(smoke_config().to_json()))
    code, out, _ = run_cli(["gen", "--config", cfg, "--out", tmp_path / "ds"], capsys)
    assert code == 0 and (tmp_path / "ds" / "manifest.json").exists()
    code, _, _ = run_cli(["train", "--config", cfg, "--seed", 1, "--data", tmp_path / "ds", "--out", tmp_path / "ck"],
                         capsys)
    assert code == 0 and (tmp_path / "ck" / "history.json").exists()
    code, _, _ = run_cli(["calibrate", "--config", cfg, "--checkpoint", tmp_path / "ck", "--kind", "platt",
                          "--out", tmp_path / "cal.json"], capsys)
    assert code == 0
    code, out, _ = run_cli(["eval", "--config", cfg, "--checkpoint", tmp_path / "ck", "--calibrator",
                            tmp_path / "cal.json", "--out", tmp_path / "eval.json"], capsys)
    assert code == 0 and set(json.loads(out)) == set(R.METRICS)


def test_cli_suite_and_report(tmp_path, capsys):
    cfg = tmp_path / "suite.json"
    cfg.write_text(json.dumps({"configs": [smoke_config(ObjectiveSpec("ce", "meep_h", lam=0.1)).to_json()]}))
    code, out, _ = run_cli(["suite", "--config", cfg, "--out", tmp_path / "s"], capsys)
    assert code == 0 and json.loads(out)["models"] == 2  # baseline added
    (tmp_path / "s" / "hist_ce.svg").unlink()
    code, _, _ = run_cli(["report", "--out", tmp_path / "s"], capsys)
    assert code == 0 and (tmp_path / "s" / "hist_ce.svg").exists()


def test_cli_error_line(tmp_path, capsys):
    code, _, err = run_cli(["eval", "--checkpoint", tmp_path / "missing"], capsys)
    assert code != 0
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["command"] == "eval" and doc["error"]
