"""Command-line entry point wiring the pipeline stages together.

Subcommands compose through on-disk artifacts only: ``synth`` writes a
manifest plus feature files, ``train``/``train-ensemble`` produce
checkpoints and history tables, ``predict`` turns checkpoints into a
predictions CSV, and ``evaluate``/``simulate``/``attention`` consume that.
Every artifact embeds the settings that produced it (a ``run_config``
object in JSON files, ``# key=value`` comment lines in CSVs).

Exit codes: 0 success, 1 validation/argument error, 2 I/O error. One
``--seed`` per subcommand drives every random choice in that stage through
named derived streams, so reruns with identical inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import seeds
from .aggregator import (
    AggregatorConfig,
    attention_weights,
    ensemble_predict,
    load_checkpoint,
    save_checkpoint,
)
from .errors import TriageError, ValidationError
from .evaluation import (
    EvaluationConfig,
    ScoredSet,
    calibration,
    evaluate,
    evaluate_partition,
    pr_points,
    read_predictions,
    roc_points,
    write_calibration,
    write_curve,
    write_predictions,
)
from .manifest import load_all_bags, load_case_bag, load_manifest
from .records import Label
from .splits import Partition, assign_folds, cases_on_side, split_patients
from .synthetic import SyntheticConfig, generate_synthetic, write_synthetic
from .tessellation import TileParams, read_mask, tessellate, write_tile_plan
from .training import TrainConfig, train_fold, write_history
from .triage_sim import SimConfig, simulate, write_counts


def _write_json(path: Path, data: dict, run_config: dict | None = None) -> None:
    obj = dict(data)
    if run_config is not None:
        obj["run_config"] = run_config
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_config_file(path: str) -> dict:
    """Flat ``key = value`` settings file; '#' starts a comment."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _coerce(value)
    return out


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def _train_config(args) -> TrainConfig:
    settings = _read_config_file(args.config) if args.config else {}
    overrides = {
        "total_iterations": args.iterations,
        "accumulation_steps": args.accumulation,
        "validation_period": args.validation_period,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            settings[key] = value
    settings.setdefault("seed", 0)
    return TrainConfig.from_dict(settings)


def _split_with_folds(cases, args, seed: int):
    split = split_patients(cases, args.test_fraction, seeds.derive(seed, "split"))
    return assign_folds(cases, split, args.folds, seeds.derive(seed, "folds"))


def _manifest_root(manifest_path: str) -> Path:
    return Path(manifest_path).parent


# ---------------------------------------------------------------- subcommands


def _cmd_synth(args) -> int:
    config = SyntheticConfig(
        n_patients=args.patients,
        prevalence_high=args.prevalence,
        class_separation=args.separation,
        seed=args.seed,
    )
    dataset = generate_synthetic(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_config = {
        "subcommand": "synth",
        "patients": args.patients,
        "prevalence": args.prevalence,
        "separation": args.separation,
        "seed": args.seed,
    }
    write_synthetic(dataset, out, run_config=run_config)
    print(f"wrote {len(dataset.cases)} cases to {args.out}")
    return 0


def _cmd_tessellate(args) -> int:
    smap = read_mask(args.mask)
    try:
        w_str, h_str = args.extent.lower().split("x", 1)
        extent = (int(w_str), int(h_str))
    except ValueError as exc:
        raise ValidationError(
            f"--extent must be WIDTHxHEIGHT in pixels, got {args.extent!r}"
        ) from exc
    params = TileParams(tile_size=args.tile_size, min_coverage=args.min_coverage)
    plan = tessellate(smap, extent, params, slide_id=args.slide_id)
    run_config = {
        "subcommand": "tessellate",
        "mask": args.mask,
        "extent": args.extent,
        "tile_size": args.tile_size,
        "min_coverage": args.min_coverage,
    }
    write_tile_plan(plan, args.out, run_config=run_config)
    print(f"planned {len(plan.tiles)} tiles ({len(plan.included())} included)")
    return 0


def _load_training_inputs(args, seed: int):
    cases = load_manifest(args.manifest)
    bags = load_all_bags(cases, _manifest_root(args.manifest))
    split = _split_with_folds(cases, args, seed)
    return cases, bags, split


def _cmd_train(args) -> int:
    train_config = _train_config(args)
    # the split derives from the effective training seed, so a seed taken
    # from the config file still reproduces the same folds
    cases, bags, split = _load_training_inputs(args, train_config.seed)
    result = train_fold(
        cases, bags, split, args.fold, AggregatorConfig(), train_config
    )
    run_config = {
        "subcommand": "train",
        "manifest": args.manifest,
        "fold": args.fold,
        "test_fraction": args.test_fraction,
        "folds": args.folds,
        **train_config.to_dict(),
    }
    metadata = {
        "fold_id": result.fold_id,
        "best_iteration": result.best_iteration,
        "train_config": train_config.to_dict(),
    }
    save_checkpoint(args.out, result.params, AggregatorConfig(), metadata=metadata)
    if args.history:
        write_history(args.history, result.history, run_config=run_config)
    best = result.best_loss
    print(
        f"fold {args.fold}: best validation loss "
        f"{'n/a' if best is None else f'{best:.4f}'} -> {args.out}"
    )
    return 0


def _cmd_train_ensemble(args) -> int:
    train_config = _train_config(args)
    cases, bags, split = _load_training_inputs(args, train_config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_config = {
        "subcommand": "train-ensemble",
        "manifest": args.manifest,
        "test_fraction": args.test_fraction,
        "folds": args.folds,
        **train_config.to_dict(),
    }
    for fold_id in range(args.folds):
        result = train_fold(
            cases, bags, split, fold_id, AggregatorConfig(), train_config
        )
        metadata = {
            "fold_id": fold_id,
            "best_iteration": result.best_iteration,
            "train_config": train_config.to_dict(),
        }
        save_checkpoint(
            out / f"fold_{fold_id}.ckpt",
            result.params,
            AggregatorConfig(),
            metadata=metadata,
        )
        write_history(
            out / f"history_fold_{fold_id}.csv", result.history,
            run_config={**run_config, "fold": fold_id},
        )
        best = result.best_loss
        print(
            f"fold {fold_id}: best validation loss "
            f"{'n/a' if best is None else f'{best:.4f}'}"
        )
    return 0


def _load_ensemble(paths: list[str]):
    members = []
    config = None
    for path in paths:
        params, ckpt_config, _ = load_checkpoint(path)
        if config is None:
            config = ckpt_config
        elif ckpt_config != config:
            raise ValidationError(
                f"checkpoint {path} disagrees with the ensemble configuration"
            )
        members.append(params)
    if not members:
        raise ValidationError("no checkpoints given")
    return members, config


def _cmd_predict(args) -> int:
    paths = list(args.checkpoints)
    if len(paths) == 1 and Path(paths[0]).is_dir():
        paths = sorted(str(p) for p in Path(paths[0]).glob("fold_*.ckpt"))
        if not paths:
            raise ValidationError(
                f"no fold_*.ckpt checkpoints in {args.checkpoints[0]}"
            )
    members, config = _load_ensemble(paths)
    cases = load_manifest(args.manifest)
    root = _manifest_root(args.manifest)
    if args.subset != "all":
        split = split_patients(
            cases, args.test_fraction, seeds.derive(args.seed, "split")
        )
        side = Partition.TEST if args.subset == "test" else Partition.DEVELOPMENT
        cases = cases_on_side(cases, split, side)
    if not cases:
        raise ValidationError(f"subset {args.subset!r} selected no cases")
    ids, probs, labels, tags = [], [], [], []
    for case in cases:
        bag = load_case_bag(case, root)
        ids.append(case.case_id)
        probs.append(ensemble_predict(members, config, bag))
        labels.append(1 if case.is_high else 0)
        tags.append(case.tags)
    sset = ScoredSet(
        case_ids=tuple(ids),
        scores=np.array(probs, dtype=np.float64),
        labels=np.array(labels, dtype=np.int8),
        tags=tuple(tags),
    )
    run_config = {
        "subcommand": "predict",
        "manifest": args.manifest,
        "checkpoints": ";".join(paths),
        "subset": args.subset,
        "test_fraction": args.test_fraction,
        "seed": args.seed,
    }
    write_predictions(args.out, sset, run_config=run_config)
    print(f"wrote {sset.n} predictions to {args.out}")
    return 0


def _sanitize(tag: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in tag)


def _cmd_evaluate(args) -> int:
    sset = read_predictions(args.predictions)
    try:
        sensitivities = tuple(
            float(part) for part in args.sensitivities.split(",") if part
        )
    except ValueError as exc:
        raise ValidationError(
            f"--sensitivities must be comma-separated numbers, got "
            f"{args.sensitivities!r}"
        ) from exc
    config = EvaluationConfig(
        bootstrap_replicates=args.bootstrap,
        n_bins=args.bins,
        sensitivities=sensitivities,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_config = {
        "subcommand": "evaluate",
        "predictions": args.predictions,
        "bootstrap": args.bootstrap,
        "bins": args.bins,
        "sensitivities": args.sensitivities,
        "seed": args.seed,
    }
    report = evaluate(sset, config)
    _write_json(out / "report.json", report, run_config=run_config)
    s, y = sset.scores, sset.labels
    write_curve(out / "roc_points.csv", roc_points(s, y), ("fpr", "tpr"),
                run_config=run_config)
    write_curve(out / "pr_points.csv", pr_points(s, y), ("recall", "precision"),
                run_config=run_config)
    write_calibration(out / "calibration.csv", calibration(s, y, args.bins),
                      run_config=run_config)
    for tag in args.partition or []:
        part_report = evaluate_partition(sset, tag, config)
        _write_json(
            out / f"report_{_sanitize(tag)}.json", part_report,
            run_config=run_config,
        )
    print(f"auroc {report['auroc']['point']:.4f} "
          f"[{report['auroc']['lower']:.4f}, {report['auroc']['upper']:.4f}] "
          f"over {report['n']} cases -> {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    pool = read_predictions(args.predictions)
    config = SimConfig(
        n_pathologists=args.pathologists,
        n_experts=args.experts,
        cases_per_iteration=args.pathologists * args.per_pathologist,
        cases_per_pathologist=args.per_pathologist,
        iterations=args.iterations,
        seed=args.seed,
    )
    report = simulate(pool, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_config = {"subcommand": "simulate", "predictions": args.predictions,
                  **config.to_dict()}
    _write_json(out / "report.json", report.to_dict(), run_config=run_config)
    write_counts(out / "counts.csv", report, run_config=run_config)
    print(
        f"prevented mean {report.prevented_mean:.2f} "
        f"[{report.prevented_lower:.1f}, {report.prevented_upper:.1f}] "
        f"-> {args.out}"
    )
    return 0


def _cmd_attention(args) -> int:
    cases = load_manifest(args.manifest)
    matches = [c for c in cases if c.case_id == args.case_id]
    if not matches:
        raise ValidationError(f"case {args.case_id!r} not found in manifest")
    case = matches[0]
    bag = load_case_bag(case, _manifest_root(args.manifest))
    params, config, _ = load_checkpoint(args.checkpoint)
    weights = attention_weights(params, config, bag)
    run_config = {
        "subcommand": "attention",
        "manifest": args.manifest,
        "checkpoint": args.checkpoint,
        "case_id": args.case_id,
    }
    with open(args.out, "w", newline="") as fh:
        for key in sorted(run_config):
            fh.write(f"# {key}={run_config[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["slide_id", "grid_x", "grid_y", "section_id", "weight"])
        for i in range(bag.n_tiles):
            writer.writerow(
                [
                    bag.slide_ids[i],
                    int(bag.grid_x[i]),
                    int(bag.grid_y[i]),
                    int(bag.section_ids[i]),
                    repr(float(weights[i])),
                ]
            )
    print(f"wrote {bag.n_tiles} attention rows to {args.out}")
    return 0


# -------------------------------------------------------------------- parser


def _add_split_flags(sub) -> None:
    sub.add_argument("--test-fraction", type=float, default=0.2,
                     help="patient fraction held out as the test side")
    sub.add_argument("--folds", type=int, default=5,
                     help="cross-validation fold count on the development side")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meltriage",
        description="Desk-scale melanocytic-lesion triage pipeline",
    )
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--patients", type=int, default=500)
    p.add_argument("--prevalence", type=float, default=0.134)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("tessellate", help="plan a tile grid from a mask")
    p.add_argument("--mask", required=True, help="segmentation mask PNG")
    p.add_argument("--extent", required=True,
                   help="slide extent WIDTHxHEIGHT at target magnification")
    p.add_argument("--tile-size", type=int, default=4096)
    p.add_argument("--min-coverage", default="0.05",
                   help="minimum tissue fraction (decimal, kept exact)")
    p.add_argument("--slide-id", default="slide")
    p.add_argument("--out", required=True, help="tile-plan CSV path")
    p.set_defaults(func=_cmd_tessellate)

    train_help = {
        "train": "train one cross-validation member",
        "train-ensemble": "train every cross-validation member",
    }
    for name, handler in (("train", _cmd_train), ("train-ensemble", _cmd_train_ensemble)):
        p = subs.add_parser(name, help=train_help[name])
        p.add_argument("--manifest", required=True)
        p.add_argument("--config", help="key = value training settings file")
        if name == "train":
            p.add_argument("--fold", type=int, required=True,
                           help="held-out validation fold")
            p.add_argument("--out", required=True, help="checkpoint path")
            p.add_argument("--history", help="validation-history CSV path")
        else:
            p.add_argument("--out", required=True,
                           help="directory for fold checkpoints and histories")
        p.add_argument("--iterations", type=int, help="override total_iterations")
        p.add_argument("--accumulation", type=int, help="override accumulation_steps")
        p.add_argument("--validation-period", type=int,
                       help="override validation_period")
        p.add_argument("--seed", type=int, default=None,
                       help="override seed (config file value otherwise, then 0)")
        _add_split_flags(p)
        p.set_defaults(func=handler)

    p = subs.add_parser("predict", help="score cases with an ensemble")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True,
                   help="checkpoint files, or one directory of fold_*.ckpt")
    p.add_argument("--subset", choices=("test", "dev", "all"), default="test")
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--seed", type=int, default=0)
    _add_split_flags(p)
    p.set_defaults(func=_cmd_predict)

    p = subs.add_parser("evaluate", help="metric report from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--bootstrap", type=int, default=10_000)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--sensitivities", default="0.95,0.98,0.99")
    p.add_argument("--partition", action="append",
                   help="also report on cases carrying this tag (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_evaluate)

    p = subs.add_parser("simulate", help="case-assignment Monte Carlo")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--iterations", type=int, default=10_000)
    p.add_argument("--pathologists", type=int, default=5)
    p.add_argument("--experts", type=int, default=1)
    p.add_argument("--per-pathologist", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_simulate)

    p = subs.add_parser("attention", help="per-tile attention map for a case")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case-id", required=True)
    p.add_argument("--out", required=True, help="attention CSV path")
    p.set_defaults(func=_cmd_attention)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the 0/1 contract
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except TriageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(run(sys.argv[1:]))
