"""Command-line front end. Subcommands mirror the pipeline stages; any of
them accepts --config JSON whose keys fill in unset flags, and FODFOM_SEED
overrides the seed list for ablate/sweep runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import fake_embed
from .background import BlurSpec, make_background, write_decisions_jsonl
from .evalmetrics import ScoredSplit, make_report, write_report
from .fixtures import SyntheticFixtureSpec, gen_fixture
from .pipeline import ExperimentPlan, run_ablation, run_single, run_sweep
from .scoring import ScoreConfig, estimate_rectify_from_inputs, score_features
from .tensorio import (
    LabeledEmbeddingSet,
    load_manifest,
    read_detections_jsonl,
    read_tensor,
    validate_manifest,
    write_tensor,
)
from .trainer import load_params, save_params, train, write_training_log
from .pipeline import train_config_from_manifest


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill None-valued options from a JSON config file, if one was given."""
    if getattr(args, "config", None) is None:
        return args
    doc = json.loads(Path(args.config).read_text())
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, value)
    return args


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(","))


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(","))


def _seeds(args) -> tuple[int, ...]:
    env = os.environ.get("FODFOM_SEED")
    if env is not None:
        return (int(env),)
    return _ints(args.seeds if args.seeds is not None else "0,1,2,3,4")


def cmd_gen_fixture(args) -> int:
    spec = SyntheticFixtureSpec(
        num_classes=args.classes if args.classes is not None else 3,
        samples_per_class=args.samples if args.samples is not None else 60,
        feature_dim=args.dim if args.dim is not None else 8,
        spread=args.spread if args.spread is not None else 3.0,
        noise=args.noise if args.noise is not None else 0.6,
        ring_radius=args.ring_radius if args.ring_radius is not None else 3.0,
        test_samples_per_class=args.test_samples if args.test_samples is not None else 25,
        ood_clusters=args.ood_clusters if args.ood_clusters is not None else 3,
        ood_samples_per_cluster=args.ood_samples if args.ood_samples is not None else 25,
        image_size=args.image_size if args.image_size is not None else 32,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest = gen_fixture(spec, args.out)
    diagnostics = validate_manifest(manifest)
    for d in diagnostics:
        print(d, file=sys.stderr)
    print(f"fixture written to {args.out}")
    return 1 if diagnostics else 0


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    diagnostics = validate_manifest(manifest)
    for d in diagnostics:
        print(d)
    print(f"{len(diagnostics)} diagnostic(s)")
    return 1 if diagnostics else 0


def cmd_synth_fakes(args) -> int:
    manifest = load_manifest(args.manifest)
    dataset = LabeledEmbeddingSet.from_manifest(manifest)
    if args.normalize:
        dataset = LabeledEmbeddingSet(
            embeddings=fake_embed.normalize_rows(dataset.embeddings),
            labels=dataset.labels,
            class_names=dataset.class_names,
        )
    alpha = args.alpha if args.alpha is not None else manifest.hyperparams.alpha
    gammas = (
        _floats(args.gammas) if args.gammas is not None else manifest.hyperparams.gammas
    )
    metric = args.metric if args.metric is not None else "cosine"
    stats = fake_embed.class_means(dataset, with_covariance=(metric == "mahalanobis"))
    selections = fake_embed.select_periphery(dataset, stats, alpha, metric)
    batch = fake_embed.synthesize_fakes(dataset, stats, selections, gammas)
    for w in batch.warnings:
        print(f"warning: {w}", file=sys.stderr)
    write_tensor(batch.embeddings, args.out)
    fake_embed.write_provenance(batch, fake_embed.provenance_path(args.out))
    print(f"{batch.embeddings.shape[0]} fake embeddings -> {args.out}")
    return 0


def cmd_gen_backgrounds(args) -> int:
    manifest = load_manifest(args.manifest)
    spec = BlurSpec(
        kernel_size=args.kernel
        if args.kernel is not None
        else manifest.hyperparams.kernel_size,
        beta_percent=args.beta if args.beta is not None else manifest.hyperparams.beta,
    )
    detections = read_detections_jsonl(manifest.resolve("detections"))
    images_dir = manifest.resolve("images")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    decisions = []
    emitted = 0
    for rec in detections:
        with Image.open(images_dir / f"{rec.image_id}.png") as im:
            img = np.asarray(im.convert("RGB"))
        result, decision = make_background(img, rec, spec)
        decisions.append(decision)
        if result is not None:
            Image.fromarray(result).save(out / f"{rec.image_id}.png")
            emitted += 1
    write_decisions_jsonl(decisions, out / "decisions.jsonl")
    print(f"{emitted}/{len(detections)} background images -> {out}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    dataset = LabeledEmbeddingSet.from_manifest(manifest)
    features = [dataset.embeddings.astype(np.float64)]
    labels = [dataset.labels]
    if args.fakes is not None:
        fakes = read_tensor(args.fakes)
        features.append(fakes.astype(np.float64))
        labels.append(np.full(fakes.shape[0], dataset.num_classes, dtype=np.int64))
    config = train_config_from_manifest(
        manifest,
        seed=args.seed if args.seed is not None else manifest.hyperparams.seed,
        lam=args.lam if args.lam is not None else manifest.hyperparams.lam,
        tau=args.tau if args.tau is not None else manifest.hyperparams.tau,
        encoder_dims=_ints(args.encoder_dims) if args.encoder_dims is not None else (32,),
    )
    if args.epochs is not None:
        config.epochs = args.epochs
    params, logs = train(
        np.concatenate(features), np.concatenate(labels), dataset.num_classes, config
    )
    save_params(params, args.out)
    if args.log is not None:
        write_training_log(logs, args.log)
    print(f"params -> {args.out} (final ce {logs[-1].ce:.4f})" if logs else f"params -> {args.out}")
    return 0


def cmd_score(args) -> int:
    params = load_params(args.params)
    features = read_tensor(args.features)
    config = ScoreConfig(
        method=args.method if args.method is not None else "react",
        react_percentile=args.react_percentile
        if args.react_percentile is not None
        else 90.0,
    )
    rectify = None
    if config.method == "react":
        if args.id_features is None:
            print("error: --id-features is required for react scoring", file=sys.stderr)
            return 1
        rectify = estimate_rectify_from_inputs(
            params, read_tensor(args.id_features), config.react_percentile
        )
    scores = score_features(params, features, config, rectify)
    write_tensor(np.asarray(scores, dtype=np.float32), args.out)
    print(f"{np.asarray(scores).size} scores -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    id_scores = read_tensor(args.id_scores)
    ood = {}
    for item in args.ood_scores:
        if "=" not in item:
            print(f"error: --ood-scores takes name=path, got {item!r}", file=sys.stderr)
            return 1
        name, path = item.split("=", 1)
        ood[name] = read_tensor(path, validate=False)
    split = ScoredSplit(id_scores=id_scores, ood_scores=ood)
    report = make_report(split, config={"id_scores": args.id_scores, "ood": sorted(ood)})
    paths = write_report(report, args.out)
    for r in report.rows + [report.average]:
        print(f"{r.name}: FPR95 {100 * r.fpr95:.2f}% AUROC {100 * r.auroc:.2f}%")
    print(f"report -> {', '.join(str(p) for p in paths)}")
    return 0


def cmd_ablate(args) -> int:
    plan = ExperimentPlan(
        manifest_path=Path(args.manifest),
        stages=tuple(args.stages.split(",")) if args.stages is not None else ("supcon", "bg_ood", "sd_ood"),
        seeds=_seeds(args),
        score_methods=(args.score_method,) if args.score_method is not None else ("react",),
    )
    rows = run_ablation(plan, args.out, workers=args.workers if args.workers is not None else 1)
    for row in rows:
        label = "+".join(sorted(row.subset)) or "baseline"
        print(
            f"{label}: FPR95 {100 * row.fpr95_median:.2f}% "
            f"AUROC {100 * row.auroc_median:.2f}%"
        )
    print(f"ablation matrix -> {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_sweep(args) -> int:
    plan = ExperimentPlan(
        manifest_path=Path(args.manifest),
        seeds=_seeds(args),
        score_methods=(args.score_method,) if args.score_method is not None else ("react",),
    )
    values = _floats(args.values) if args.values is not None else None
    points = run_sweep(plan, args.axis, args.out, values)
    for p in points:
        print(
            f"{args.axis}={p.value}: FPR95 {100 * p.fpr95_median:.2f}% "
            f"AUROC {100 * p.auroc_median:.2f}%"
        )
    print(f"sweep curve -> {Path(args.out) / f'sweep_{args.axis}.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fodfom",
        description="fake-outlier construction, (C+1)-class training, and OOD scoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file providing defaults for unset flags")

    p = sub.add_parser("gen-fixture", help="write a synthetic desk-scale fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--spread", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--ring-radius", type=float, dest="ring_radius")
    p.add_argument("--test-samples", type=int, dest="test_samples")
    p.add_argument("--ood-clusters", type=int, dest="ood_clusters")
    p.add_argument("--ood-samples", type=int, dest="ood_samples")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--seed", type=int)
    add_config(p)
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("validate", help="validate a manifest and its files")
    p.add_argument("--manifest", required=True)
    add_config(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth-fakes", help="synthesize fake OOD embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gammas", help="comma-separated step lengths")
    p.add_argument("--metric", choices=["cosine", "euclidean", "mahalanobis"])
    p.add_argument("--normalize", action="store_true", help="L2-normalize rows first")
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_synth_fakes)

    p = sub.add_parser("gen-backgrounds", help="blur foregrounds into background images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kernel", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_gen_backgrounds)

    p = sub.add_parser("train", help="train the (C+1)-way classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fakes", help="FODF tensor of fake embeddings to append as class C")
    p.add_argument("--lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--encoder-dims", dest="encoder_dims", help="comma-separated widths")
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score features with a trained model")
    p.add_argument("--params", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--method", choices=["msp", "msp_pre_c", "msp_ratio", "energy", "react"])
    p.add_argument("--react-percentile", type=float, dest="react_percentile")
    p.add_argument("--id-features", dest="id_features", help="ID features for the react threshold")
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="FPR95/AUROC report from score tensors")
    p.add_argument("--id-scores", dest="id_scores", required=True)
    p.add_argument(
        "--ood-scores",
        dest="ood_scores",
        action="append",
        required=True,
        help="name=path, repeatable",
    )
    p.add_argument("--out", required=True, help="output prefix for .csv/.md/ROC files")
    add_config(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="stage-subset ablation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stages", help="comma-separated toggles among supcon,bg_ood,sd_ood")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--score-method", dest="score_method")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="hyperparameter sensitivity curve")
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", choices=["lambda", "tau", "alpha"], required=True)
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--score-method", dest="score_method")
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config(args)
    try:
        return args.func(args)
    except Exception as e:  # surface a clean message, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
