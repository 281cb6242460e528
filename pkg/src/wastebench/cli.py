"""Command-line entry point.

Exit codes: 0 success, 1 IO error, 2 validation error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fusion, manifest as mf, metrics, pipeline, trainer
from .config import RunConfig
from .errors import ConfigError, IOFailure, WasteBenchError
from .models import build_model, load_checkpoint, save_checkpoint

logger = logging.getLogger("wastebench")


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _existing(cfg, key):
    p = cfg.path(key, required=True)
    if not p.is_file():
        raise ConfigError(f"paths.{key}: no such file {p}")
    return p


# --- ingest / balance ----------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args):
    manifest = mf.parse_manifest(_existing(cfg, "manifest"))
    root = cfg.dataset_root
    root.mkdir(parents=True, exist_ok=True)
    if cfg.path("corrections") is not None:
        manifest = mf.apply_corrections(manifest, mf.load_corrections(_existing(cfg, "corrections")))
        _write_json(root / "corrections_audit.json", list(manifest.audit))
    p = cfg.data["pipeline"]
    plan = mf.make_splits(manifest, p["validation_fraction"], p["split_seed"])
    for flag in plan.flags:
        logger.warning(flag)
    layout = mf.materialize(manifest, plan, root, cfg.path("image_root"), p["materialize_mode"])
    assigned = manifest.assign(plan)
    assigned.save(root / "manifest.json")
    plan.save(root / "split_plan.json")
    summary = mf.summarize(assigned)
    summary["folders"] = layout
    _write_json(root / "summary.json", summary)
    print(mf.format_summary(summary), end="")
    return 0


def cmd_balance(cfg: RunConfig, args):
    root = cfg.dataset_root
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"{manifest_path} not found; run `ingest` first")
    full = mf.parse_manifest(manifest_path)
    train_split = full.with_split(mf.Split.TRAIN)
    p = cfg.data["pipeline"]
    plan = pipeline.balance(train_split, seed=p["balance_seed"])
    folder = f"train/{plan.minority_label.folder}"
    balanced = pipeline.execute_balance(train_split, plan, cfg.path("image_root"), root,
                                        global_seed=cfg.data["train"]["global_seed"],
                                        ranges=cfg.augmentation(), folder=folder)
    plan.save(root / "balance_plan.json")
    balanced.save(root / "manifest_balanced_train.json")
    counts = {lab.folder: n for lab, n in balanced.class_counts.items()}
    _write_json(root / "balance_summary.json", {"copies": plan.total_copies, "train_counts": counts,
                                                "folders": mf.folder_summary(root)})
    print(f"minority={plan.minority_label.folder} copies={plan.total_copies} "
          f"train counts: negative={counts['negative']} positive={counts['positive']}")
    return 0


# --- train / predict -------------------------------------------------------------


def _run_name(cfg):
    spec = cfg.model_spec()
    name = spec.name
    if getattr(spec, "frozen_prefix", 0):
        name += f"_frozen{spec.frozen_prefix}"
    return name


def _datasets(cfg, tc):
    root = cfg.dataset_root
    stats = cfg.normalization()
    train_set = trainer.ImageSet.from_folder(root / "train", stats, augment=True, global_seed=tc.global_seed,
                                             ranges=cfg.augmentation(), augment_labels=cfg.augment_labels())
    val_set = trainer.ImageSet.from_folder(root / "validation", stats)
    test_set = trainer.ImageSet.from_folder(root / "test", stats)
    return train_set, val_set, test_set


def _train_one(cfg: RunConfig):
    tc = cfg.train_config()
    run_dir = cfg.output_root / "runs" / _run_name(cfg) / tc.optimizer.kind / str(tc.global_seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "resolved_config.yaml")
    train_set, val_set, test_set = _datasets(cfg, tc)
    model = build_model(cfg.model_spec(), cfg.path("weights_registry"), seed=tc.global_seed)
    result = trainer.train(model, train_set, val_set, tc)
    trainer.write_history(result.history, run_dir / "history.csv")
    save_checkpoint(model, run_dir / "checkpoint.pt", {
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "optimizer": tc.optimizer.kind,
        "history": [[r.epoch, r.train_loss, r.validation_loss, r.validation_accuracy] for r in result.history],
    })
    eval_set, split = (test_set, "test") if len(test_set) else (val_set, "validation")
    preds = trainer.predict(model, eval_set, run_dir / "predictions.csv", tc.batch_size)
    report = metrics.evaluate(preds, cfg.tie_break())
    doc = report.to_json()
    doc["split"] = split
    _write_json(run_dir / "metrics.json", doc)
    print(f"{run_dir}: best epoch {result.best_epoch}/{result.epochs_run}, "
          f"{split} accuracy {report.weighted.accuracy * 100:.2f}")
    return run_dir


def cmd_train(cfg: RunConfig, args):
    overrides = {"train": {}, "model": {}}
    if args.model:
        overrides["model"]["architecture"] = args.model
    if args.freeze is not None:
        overrides["model"]["frozen_prefix"] = args.freeze
    if args.no_pretrained:
        overrides["model"]["pretrained"] = False
    if args.seed is not None:
        overrides["train"]["global_seed"] = args.seed
    for flag, key in (("max_epochs", "max_epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("patience", "patience"), ("workers", "num_workers")):
        val = getattr(args, flag)
        if val is not None:
            overrides["train"][key] = val
    kinds = trainer.OPTIMIZER_KINDS if args.optimizer == "all" else [args.optimizer] if args.optimizer else [None]
    for kind in kinds:
        o = json.loads(json.dumps(overrides))
        if kind is not None and kind != cfg.data["train"]["optimizer"]["kind"]:
            o["train"]["optimizer"] = {"kind": kind, "hyperparams": {}}
        _train_one(cfg.with_overrides(o))
    return 0


def cmd_predict(cfg: RunConfig, args):
    model, _ = load_checkpoint(args.checkpoint)
    folder = cfg.dataset_root / args.split
    if not folder.is_dir():
        raise IOFailure(f"no dataset folder {folder}")
    data = trainer.ImageSet.from_folder(folder, cfg.normalization())
    preds = trainer.predict(model, data, args.output, cfg.train_config().batch_size)
    print(f"wrote {len(preds)} predictions to {args.output}")
    return 0


# --- evaluate / fuse / report ---------------------------------------------------------


def _baselines(cfg):
    return metrics.BaselineTable.load(cfg.path("baselines"))


def _evaluate_records(cfg, records, out_dir, baseline_model=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = metrics.evaluate(records, cfg.tie_break())
    doc = report.to_json()
    text = report.to_text()
    try:
        roc = metrics.roc_report(records)
    except WasteBenchError as exc:
        logger.warning("ROC skipped: %s", exc)
    else:
        metrics.write_roc(roc, out_dir, svg=cfg.data["report"]["roc_svg"])
        doc["auc"] = roc.to_json()
        text += "AUC  " + "  ".join(f"{k}={v:.4f}" for k, v in roc.auc.items()) + "\n"
    baseline_model = baseline_model or cfg.data["report"]["baseline_model"]
    ok = True
    if baseline_model:
        cmp = metrics.compare_to_baseline(report.weighted, _baselines(cfg), baseline_model,
                                          cfg.data["report"]["tolerance_pp"])
        doc["baseline"] = cmp.to_json()
        text += cmp.to_text()
        ok = cmp.passed
    _write_json(out_dir / "report.json", doc)
    (out_dir / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return ok


def cmd_evaluate(cfg: RunConfig, args):
    for path in map(Path, args.predictions):
        default = cfg.output_root / "reports" / f"{path.parent.name}_{path.stem}"
        if args.out:
            out = Path(args.out) / path.stem if len(args.predictions) > 1 else Path(args.out)
        else:
            out = default
        print(f"== {path}")
        _evaluate_records(cfg, fusion.load_prediction_file(path), out, args.baseline_model)
    return 0


def cmd_fuse(cfg: RunConfig, args):
    if args.preset == "three_model":
        names = list(fusion.THREE_MODEL_PRESET)
        runs = cfg.output_root / "runs"
        inputs = [runs / n / args.optimizer / str(args.seed) / "predictions.csv" for n in names]
    else:
        inputs = [Path(p) for p in args.inputs or []]
        names = args.names or [f"{p.parent.name}/{p.stem}" if p.stem == "predictions" else p.stem for p in inputs]
        if len(set(names)) != len(names):
            names = [str(p) for p in inputs]
    if len(inputs) < 2:
        raise ConfigError("fuse needs at least two --inputs (or --preset three_model)")
    out_dir = Path(args.out) if args.out else cfg.output_root / "fusion"
    out_dir.mkdir(parents=True, exist_ok=True)
    fused_path = out_dir / "fused.csv"
    fused = fusion.fuse_files(inputs, names, fused_path, args.allow_intersection)
    fusion.write_fusion_manifest(out_dir / "fusion_manifest.json", inputs, names, fused_path, args.allow_intersection)
    if all(r.true_label is not None for r in fused):
        baseline = args.baseline_model or ("three_model_fusion" if args.preset == "three_model" else None)
        _evaluate_records(cfg, fused, out_dir, baseline)
    else:
        print(f"wrote {len(fused)} fused predictions to {fused_path} (no labels, metrics skipped)")
    return 0


def cmd_report(cfg: RunConfig, args):
    runs = Path(args.runs) if args.runs else cfg.output_root / "runs"
    baselines = _baselines(cfg)
    rows, comparisons = [], {}
    for pred in sorted(runs.glob("*/*/*/predictions.csv")):
        model, opt, seed = pred.parts[-4:-1]
        w = metrics.evaluate(fusion.load_prediction_file(pred), cfg.tie_break()).weighted
        name = f"{model}/{opt}/{seed}"
        rows.append((name, w.values()))
        for key in (f"{model}/{opt}", model):
            if key in baselines.entries:
                comparisons[name] = metrics.compare_to_baseline(w, baselines, key,
                                                                cfg.data["report"]["tolerance_pp"]).to_json()
                break
    if not rows:
        raise IOFailure(f"no runs with predictions under {runs}")
    text = metrics.format_table(rows, first="Run (model/optimizer/seed)")
    out = cfg.output_root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    _write_json(out / "summary.json", {"runs": {n: {k: round(v * 100, 2) for k, v in vals.items()} for n, vals in rows},
                                       "baseline_comparisons": comparisons})
    print(text, end="")
    return 0


def cmd_describe(cfg: RunConfig, args):
    overrides = {"model": {"pretrained": False}}
    if args.model:
        overrides["model"]["architecture"] = args.model
    model = build_model(cfg.with_overrides(overrides).model_spec())
    for row in model.describe():
        mark = "frozen" if row["frozen"] else ""
        print(f"{row['index']:4d}  {row['name']:<60} {row['type']:<20} {row['parameters']:>9}  {mark}")
    print(f"layers={model.layer_count} parameters={model.parameter_count} trainable={model.trainable_parameter_count}")
    return 0


def cmd_synth(cfg: RunConfig, args):
    from .synthetic import write_toy_dataset

    path = write_toy_dataset(args.out, n=args.n, seed=args.seed, positive_fraction=args.positive_fraction)
    print(f"wrote {args.n} synthetic images and {path}")
    return 0


# --- argument parsing -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="wastebench", description=__doc__.splitlines()[0])
    parser.add_argument("-c", "--config", help="YAML run config (defaults are packaged)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", help="parse manifest, apply corrections, split and lay out folders")
    sub.add_parser("balance", help="augment the minority class of the training split")

    p = sub.add_parser("train", help="train a model and export test predictions")
    p.add_argument("--model", help="architecture name or parallel_ensemble")
    p.add_argument("--optimizer", help=f"one of {', '.join(trainer.OPTIMIZER_KINDS)}, or 'all'")
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze", type=int, help="number of leading parameterised layers to freeze")
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-pretrained", dest="no_pretrained", action="store_true")

    p = sub.add_parser("predict", help="write a prediction CSV from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--output", required=True)

    p = sub.add_parser("evaluate", help="metrics, ROC and baseline comparison for prediction files")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--baseline-model", dest="baseline_model")
    p.add_argument("--out")

    p = sub.add_parser("fuse", help="average class probabilities across prediction files")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--names", nargs="+")
    p.add_argument("--preset", choices=["three_model"], help="ensemble + both members from the runs directory")
    p.add_argument("--optimizer", default="adamw", help="run directory used by --preset")
    p.add_argument("--seed", default="0", help="run directory used by --preset")
    p.add_argument("--allow-intersection", dest="allow_intersection", action="store_true")
    p.add_argument("--baseline-model", dest="baseline_model")
    p.add_argument("--out")

    p = sub.add_parser("report", help="summarise all runs and compare with baseline tables")
    p.add_argument("--runs")

    p = sub.add_parser("describe", help="print the canonical layer ordering used for freezing")
    p.add_argument("--model")

    p = sub.add_parser("synth", help="write the synthetic bright/dark toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-fraction", dest="positive_fraction", type=float, default=0.5)
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "balance": cmd_balance,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
    "report": cmd_report,
    "describe": cmd_describe,
    "synth": cmd_synth,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        return COMMANDS[args.command](cfg, args)
    except WasteBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
