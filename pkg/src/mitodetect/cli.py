"""Command-line entry point.

Subcommands: synth, split, train, infer, eval, report. Exit codes: 0 on
success, 2 for usage or validation errors, 3 for runtime failures.
The run root defaults to ``$MITODETECT_RUN_ROOT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig
from .data_model import ManifestError, generate_synthetic_dataset, load_manifest, write_manifest
from .evaluation import DomainMetricsReport, detection_f1, domain_report, read_classification_predictions
from .geometry import read_detections
from .pipeline import discover_runs, fold_dir, load_ensemble, predict_records, run_training, select_records
from .splitting import FoldPlan, SplitError, make_fold_plan
from .training import TrainingError

log = logging.getLogger("mitodetect")

RUN_ROOT_ENV = "MITODETECT_RUN_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _run_root(arg: str | None, config: RunConfig | None = None) -> Path:
    return Path(arg or (config.run_root if config else None) or os.environ.get(RUN_ROOT_ENV, "runs"))


def cmd_synth(args) -> int:
    manifest = generate_synthetic_dataset(
        args.seed, args.slides, args.patches, args.track, args.positive_rate, args.image_size
    )
    path = write_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} {args.track} records to {path}")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    detection = manifest.track == "detection"
    strat = args.strat or ("tissue_domain" if detection else "class_label")
    group = args.group or ("none" if detection else "slide_id")
    plan = make_fold_plan(manifest, args.k, args.test_fraction, strat, group, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plan.save(args.out)
    print(f"wrote {args.k}-fold plan ({len(plan.test_ids)} test ids) to {args.out}")
    return EXIT_OK


def _load_config(args) -> RunConfig:
    if args.config:
        config = RunConfig.load(args.config)
    else:
        if not args.manifest:
            raise UsageError("train needs --config or --manifest")
        config = RunConfig.for_track(load_manifest(args.manifest).track)
    for flag, attr in (("manifest", "manifest"), ("plan", "plan")):
        if getattr(args, flag):
            setattr(config, attr, getattr(args, flag))
    if args.seed is not None:
        config.train.seed = args.seed
    if args.max_epochs is not None:
        config.train.max_epochs = args.max_epochs
    if args.lr is not None:
        config.train.optimizer.lr = args.lr
    if not config.manifest or not config.plan:
        raise UsageError("manifest and plan must be given in the config or as flags")
    return config


def cmd_train(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(config.manifest)
    plan = FoldPlan.load(config.plan)
    folds = range(plan.k) if args.fold is None else [args.fold]
    root = _run_root(args.run_root, config)
    for fold in folds:
        if not 0 <= fold < plan.k:
            raise UsageError(f"fold {fold} outside plan with k={plan.k}")
        ledger = run_training(config, manifest, plan, fold, fold_dir(root, fold))
        print(f"fold {fold}: best epoch {ledger.best_epoch} "
              f"(val loss {ledger.best_val_loss:.5f}); {ledger.stop_reason}")
    return EXIT_OK


def cmd_infer(args) -> int:
    runs = discover_runs(args.runs or [_run_root(None)])
    if not runs:
        raise UsageError(f"no trained run directories under {args.runs}")
    config, models = load_ensemble(runs)
    manifest = load_manifest(args.manifest or config.manifest)
    plan_path = args.plan or config.plan
    plan = FoldPlan.load(plan_path) if plan_path and Path(plan_path).is_file() else None
    records = select_records(manifest, plan, args.ids)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    predict_records(config, models, records, args.out, use_tta=args.tta)
    print(f"wrote predictions for {len(records)} patches to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = FoldPlan.load(args.plan) if args.plan else None
    which = args.ids or ("test" if plan is not None else "all")
    records = select_records(manifest, plan, which)
    if manifest.track == "detection":
        preds = read_detections(args.predictions)
        truth = {r.patch_id: r.centroids or [] for r in records}
        scores = detection_f1(preds, truth, args.radius)
        payload = {"precision": scores.precision, "recall": scores.recall, "f1": scores.f1,
                   "tp": scores.tp, "fp": scores.fp, "fn": scores.fn, "radius_px": args.radius}
        (out_dir / "detection.json").write_text(json.dumps(payload, indent=1) + "\n")
        print(f"precision {scores.precision:.3f}  recall {scores.recall:.3f}  F1 {scores.f1:.3f}")
        return EXIT_OK

    wanted = {r.patch_id for r in records}
    rows = [r for r in read_classification_predictions(args.predictions) if r["patch_id"] in wanted]
    if not rows:
        raise UsageError(f"no predictions for the selected ids ({which})")
    labels = manifest.by_id()
    missing = [r["patch_id"] for r in rows if r["patch_id"] not in labels]
    if missing:
        raise UsageError(f"predictions reference unknown patch ids: {missing[:5]}")
    y = [labels[r["patch_id"]].class_label for r in rows]
    p = [r["probability"] for r in rows]
    doms = [r["domain_id"] if args.by_domain else -1 for r in rows]
    report = domain_report(doms, y, p, args.threshold)
    if not args.by_domain:
        report.domains = {}
    report.save(out_dir)
    print(report.format_table())
    return EXIT_OK


def cmd_report(args) -> int:
    report = DomainMetricsReport.from_json(json.loads(Path(args.report).read_text()))
    table = report.format_table()
    if args.out:
        Path(args.out).write_text(table + "\n")
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitodetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--track", choices=["detection", "classification"], required=True)
    p.add_argument("--slides", type=int, default=4)
    p.add_argument("--patches", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-rate", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--out", required=True, help="manifest path; images go next to it")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="hold-out + K-fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--strat", choices=["tissue_domain", "class_label"])
    p.add_argument("--group", choices=["slide_id", "none"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold (or all folds)")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--plan")
    p.add_argument("--fold", type=int, default=None, help="default: every fold in sequence")
    p.add_argument("--run-root")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="ensemble prediction from trained runs")
    p.add_argument("--runs", nargs="+", help="fold run dirs or a run root")
    p.add_argument("--manifest")
    p.add_argument("--plan")
    p.add_argument("--ids", default="test", help="test | all | val<k>")
    p.add_argument("--tta", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a prediction file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--by-domain", action="store_true")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--radius", type=float, default=30.0)
    p.add_argument("--plan", help="fold plan used to select ids")
    p.add_argument("--ids", help="test | all | val<k>; default test with --plan, else all")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a saved report as a table")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, SplitError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
