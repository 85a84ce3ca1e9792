"""Command-line entry point: ``meep {gen,train,eval,calibrate,suite,report}``.

Failures print a single JSON line ``{"error": ..., "message": ...}`` on
stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import posthoc
from .runner import (ExperimentConfig, RunRecord, evaluate, fit_posthoc, load_results, run_suite, suite_from_json,
                     train)
from .seg_model import load_checkpoint, save_checkpoint
from .synthdata import TaskConfig, generate, load_dataset, save_dataset


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def _experiment(args) -> ExperimentConfig:
    return ExperimentConfig.from_json(_read_json(args.config)) if args.config else ExperimentConfig()


def _data(args, config: ExperimentConfig):
    return load_dataset(args.data) if args.data else generate(config.task)


def cmd_gen(args) -> dict:
    d = _read_json(args.config) if args.config else {}
    task = TaskConfig.from_json(d.get("task", d))
    if args.seed is not None:
        task.seed = args.seed
    save_dataset(generate(task), args.out)
    return {"dataset": str(args.out), "task": task.to_json()}


def cmd_train(args) -> dict:
    config = _experiment(args)
    seed = config.seeds[0] if args.seed is None else args.seed
    params, history = train(config, seed, _data(args, config),
                            on_epoch=lambda r: logging.info("epoch %(epoch)d loss %(train_loss).5f", r))
    out = Path(args.out)
    save_checkpoint(params, None, out)
    _write_json(out / "history.json", {"config": config.to_json(), "seed": seed, "history": history})
    return {"checkpoint": str(out), "final_loss": history[-1]["train_loss"]}


def cmd_calibrate(args) -> dict:
    config = _experiment(args)
    params, _ = load_checkpoint(args.checkpoint)
    data = _data(args, config)
    kind = args.kind or config.posthoc
    if kind == "none":
        raise ValueError("choose a calibrator with --kind platt|isotonic")
    seed = config.seeds[0] if args.seed is None else args.seed
    cal = fit_posthoc(kind, params, data.val, data.test, seed)
    _write_json(Path(args.out), cal.to_json())
    return {"calibrator": str(args.out), **cal.to_json()}


def cmd_eval(args) -> dict:
    config = _experiment(args)
    params, _ = load_checkpoint(args.checkpoint)
    data = _data(args, config)
    cal = posthoc.calibrator_from_json(_read_json(args.calibrator)) if args.calibrator else None
    result = evaluate(params, data[args.split], config.ece_bins, cal)
    doc = result.to_json()
    if args.out:
        _write_json(Path(args.out), doc)
    return result.row()


def cmd_suite(args) -> dict:
    d = _read_json(args.config) if args.config else {"suite": "default"}
    if args.seed is not None:
        d["seeds"] = [args.seed]
    records = run_suite(suite_from_json(d), args.out)
    failed = sum(r["status"] != "ok" for rec in records for r in rec.rows)
    return {"results": str(Path(args.out) / "results.csv"), "models": len(records), "failed_runs": failed}


def cmd_report(args) -> dict:
    from .plots import render_reports

    records: list[RunRecord] = load_results(args.results or args.out)
    written = render_reports(records, args.out)
    return {"written": [str(p) for p in written]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--out", required=out_required, help="output path")
        p.set_defaults(fn=fn)
        return p

    add("gen", cmd_gen, "generate and save the synthetic dataset")
    p = add("train", cmd_train, "train one model and save a checkpoint directory")
    p.add_argument("--data", help="dataset directory from `gen` (default: regenerate from config)")
    p = add("calibrate", cmd_calibrate, "fit a post-hoc calibrator on the validation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("platt", "isotonic"))
    p.add_argument("--data")
    p = add("eval", cmd_eval, "evaluate a checkpoint", out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibrator", help="calibrator JSON from `calibrate`")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--data")
    add("suite", cmd_suite, "run a comparison suite and write results, plots and checkpoints")
    p = add("report", cmd_report, "re-render plots and CSV from results.json")
    p.add_argument("--results", help="directory holding results.json (default: --out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        summary = args.fn(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps(summary, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
