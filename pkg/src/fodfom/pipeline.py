"""End-to-end experiment orchestration: fixture -> fakes -> backgrounds ->
train -> score -> eval, plus the ablation grid over stage subsets and the
hyperparameter sensitivity sweeps.

Every run is deterministic given (plan, seed); artifacts land in per-run
directories so independent runs never share files.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import fake_embed
from .background import BlurSpec, make_background, write_decisions_jsonl
from .evalmetrics import EvalReport, ScoredSplit, make_report, write_report
from .fixtures import featurize_image, load_fixture_spec
from .scoring import ScoreConfig, estimate_rectify_from_inputs, score_features
from .tensorio import (
    LabeledEmbeddingSet,
    Manifest,
    load_manifest,
    read_detections_jsonl,
    read_tensor,
    write_tensor,
)
from .trainer import TrainConfig, save_params, train, write_training_log

STAGES = ("supcon", "bg_ood", "sd_ood")


@dataclass
class ExperimentPlan:
    manifest_path: Path
    stages: tuple[str, ...] = STAGES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    score_methods: tuple[str, ...] = ("react",)
    sweep_values: dict[str, tuple[float, ...]] = field(
        default_factory=lambda: {
            "lambda": (0.05, 0.5, 1.0, 2.0),
            "tau": (0.01, 0.1, 1.0, 4.0),
            "alpha": (10.0, 20.0, 30.0),
        }
    )
    encoder_dims: tuple[int, ...] = (32,)

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("plan needs at least one stage")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}; valid: {STAGES}")
        if not self.seeds:
            raise ValueError("plan needs at least one seed")


@dataclass
class Overrides:
    lam: float | None = None
    tau: float | None = None
    alpha: float | None = None


@dataclass
class RunResult:
    report: EvalReport
    run_dir: Path
    fpr95: float
    auroc: float


def synthesize_fake_features(
    manifest: Manifest,
    dataset: LabeledEmbeddingSet,
    alpha: float,
    metric: str = "cosine",
    out_path: Path | None = None,
) -> fake_embed.FakeEmbeddingBatch:
    """Run the periphery-step synthesis stage over the training embeddings."""
    stats = fake_embed.class_means(
        dataset, with_covariance=(metric == "mahalanobis")
    )
    selections = fake_embed.select_periphery(dataset, stats, alpha, metric)
    batch = fake_embed.synthesize_fakes(
        dataset, stats, selections, manifest.hyperparams.gammas
    )
    if out_path is not None:
        write_tensor(batch.embeddings, out_path)
        fake_embed.write_provenance(batch, fake_embed.provenance_path(out_path))
    return batch


def generate_background_features(
    manifest: Manifest, out_dir: Path
) -> np.ndarray:
    """Blur every gated training image and featurize the results.

    Writes the blurred PNGs and the decision log under `out_dir`; returns the
    [M, D] feature array for the emitted images (may be empty).
    """
    spec_path = manifest.resolve("fixture_spec")
    fx = load_fixture_spec(spec_path)
    blur = BlurSpec(
        kernel_size=manifest.hyperparams.kernel_size,
        beta_percent=manifest.hyperparams.beta,
    )
    detections = read_detections_jsonl(manifest.resolve("detections"))
    images_dir = manifest.resolve("images")
    out_dir.mkdir(parents=True, exist_ok=True)
    decisions = []
    feats = []
    for rec in detections:
        with Image.open(images_dir / f"{rec.image_id}.png") as im:
            img = np.asarray(im.convert("RGB"))
        result, decision = make_background(img, rec, blur)
        decisions.append(decision)
        if result is not None:
            Image.fromarray(result).save(out_dir / f"{rec.image_id}.png")
            feats.append(featurize_image(result, fx.feature_dim, fx.pixel_scale))
    write_decisions_jsonl(decisions, out_dir / "decisions.jsonl")
    if feats:
        return np.stack(feats)
    return np.zeros((0, fx.feature_dim))


def train_config_from_manifest(
    manifest: Manifest,
    seed: int,
    lam: float,
    tau: float,
    encoder_dims: tuple[int, ...],
) -> TrainConfig:
    opt = manifest.hyperparams.optimizer
    return TrainConfig(
        lam=lam,
        tau=tau,
        base_lr=opt.base_lr,
        warmup_epochs=opt.warmup_epochs,
        warmup_start_lr=opt.warmup_start_lr,
        milestones=opt.milestones,
        decay_factor=opt.decay_factor,
        momentum=opt.momentum,
        weight_decay=opt.weight_decay,
        batch_size=opt.batch_size,
        epochs=opt.epochs,
        seed=seed,
        encoder_dims=encoder_dims,
    )


def run_single(
    manifest: Manifest,
    enabled: frozenset[str],
    seed: int,
    run_dir: Path,
    overrides: Overrides = Overrides(),
    score_method: str = "react",
    encoder_dims: tuple[int, ...] = (32,),
) -> RunResult:
    """One train+eval run with the given stage subset enabled."""
    run_dir.mkdir(parents=True, exist_ok=True)
    hp = manifest.hyperparams
    lam = overrides.lam if overrides.lam is not None else hp.lam
    tau = overrides.tau if overrides.tau is not None else hp.tau
    alpha = overrides.alpha if overrides.alpha is not None else hp.alpha

    dataset = LabeledEmbeddingSet.from_manifest(manifest)
    c = dataset.num_classes
    features = [dataset.embeddings.astype(np.float64)]
    labels = [dataset.labels]

    if "sd_ood" in enabled:
        batch = synthesize_fake_features(
            manifest, dataset, alpha, out_path=run_dir / "fakes.fodf"
        )
        if batch.embeddings.shape[0]:
            features.append(batch.embeddings.astype(np.float64))
            labels.append(np.full(batch.embeddings.shape[0], c, dtype=np.int64))

    if "bg_ood" in enabled:
        bg = generate_background_features(manifest, run_dir / "backgrounds")
        if bg.shape[0]:
            features.append(bg)
            labels.append(np.full(bg.shape[0], c, dtype=np.int64))

    lam_effective = lam if "supcon" in enabled else 0.0
    config = train_config_from_manifest(manifest, seed, lam_effective, tau, encoder_dims)
    params, logs = train(
        np.concatenate(features), np.concatenate(labels), c, config
    )
    save_params(params, run_dir / "params.fodf")
    write_training_log(logs, run_dir / "training_log.csv")

    id_test = read_tensor(manifest.resolve("id_test_embeddings"))
    ood_test = read_tensor(manifest.resolve("ood_test_embeddings"))
    score_config = ScoreConfig(method=score_method)
    rectify = None
    if score_method == "react":
        rectify = estimate_rectify_from_inputs(
            params, dataset.embeddings, score_config.react_percentile
        )
    id_scores = score_features(params, id_test, score_config, rectify)
    ood_scores = score_features(params, ood_test, score_config, rectify)
    write_tensor(id_scores.astype(np.float32), run_dir / "id_scores.fodf")
    write_tensor(ood_scores.astype(np.float32), run_dir / "ood_scores.fodf")

    split = ScoredSplit(id_scores=id_scores, ood_scores={"synthetic": ood_scores})
    report = make_report(
        split,
        config={
            "stages": sorted(enabled),
            "seed": seed,
            "lambda": lam_effective,
            "tau": tau,
            "alpha": alpha,
            "score_method": score_method,
        },
    )
    write_report(report, run_dir / "report")
    return RunResult(
        report=report,
        run_dir=run_dir,
        fpr95=report.average.fpr95,
        auroc=report.average.auroc,
    )


def subset_label(subset: frozenset[str]) -> str:
    if not subset:
        return "baseline"
    return "+".join(s for s in STAGES if s in subset)


def stage_subsets(stages: tuple[str, ...]) -> list[frozenset[str]]:
    """All subsets of the toggled stages, smallest first, canonical order."""
    ordered = [s for s in STAGES if s in stages]
    subsets = []
    for r in range(len(ordered) + 1):
        for combo in itertools.combinations(ordered, r):
            subsets.append(frozenset(combo))
    return subsets


@dataclass
class AblationRow:
    subset: frozenset[str]
    fpr95_median: float
    auroc_median: float
    per_seed: list[RunResult]


def _ablation_job(args) -> tuple[str, int, RunResult]:
    manifest_path, subset, seed, run_dir, score_method, encoder_dims = args
    manifest = load_manifest(manifest_path)
    result = run_single(
        manifest,
        frozenset(subset),
        seed,
        Path(run_dir),
        score_method=score_method,
        encoder_dims=encoder_dims,
    )
    return subset_label(frozenset(subset)), seed, result


def run_ablation(
    plan: ExperimentPlan, out_dir: str | Path, workers: int = 1
) -> list[AblationRow]:
    """Train+eval once per subset of the toggled stages, per seed.

    Emits a CSV matrix with one row per subset and median metrics over seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    score_method = plan.score_methods[0]
    subsets = stage_subsets(plan.stages)
    jobs = []
    for subset in subsets:
        for seed in plan.seeds:
            run_dir = out / f"run_{subset_label(subset)}" / f"seed_{seed}"
            jobs.append(
                (
                    str(plan.manifest_path),
                    tuple(sorted(subset)),
                    seed,
                    str(run_dir),
                    score_method,
                    plan.encoder_dims,
                )
            )
    results: dict[tuple[str, int], RunResult] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for label, seed, result in pool.map(_ablation_job, jobs):
                results[(label, seed)] = result
    else:
        for job in jobs:
            label, seed, result = _ablation_job(job)
            results[(label, seed)] = result

    rows = []
    for subset in subsets:
        label = subset_label(subset)
        per_seed = [results[(label, seed)] for seed in plan.seeds]
        rows.append(
            AblationRow(
                subset=subset,
                fpr95_median=float(np.median([r.fpr95 for r in per_seed])),
                auroc_median=float(np.median([r.auroc for r in per_seed])),
                per_seed=per_seed,
            )
        )

    lines = ["supcon,bg_ood,sd_ood,fpr95_median,auroc_median"]
    for row in rows:
        flags = ",".join("1" if s in row.subset else "0" for s in STAGES)
        lines.append(f"{flags},{row.fpr95_median!r},{row.auroc_median!r}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return rows


@dataclass
class SweepPoint:
    value: float
    fpr95_median: float
    auroc_median: float


def run_sweep(
    plan: ExperimentPlan,
    axis: str,
    out_dir: str | Path,
    values: tuple[float, ...] | None = None,
) -> list[SweepPoint]:
    """Sensitivity curve along one hyperparameter axis, all stages enabled."""
    if axis not in ("lambda", "tau", "alpha"):
        raise ValueError(f"axis must be lambda, tau, or alpha, got {axis!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = values if values is not None else plan.sweep_values[axis]
    manifest = load_manifest(plan.manifest_path)
    score_method = plan.score_methods[0]
    points = []
    for value in values:
        overrides = Overrides(
            lam=value if axis == "lambda" else None,
            tau=value if axis == "tau" else None,
            alpha=value if axis == "alpha" else None,
        )
        per_seed = []
        for seed in plan.seeds:
            run_dir = out / f"sweep_{axis}_{value}" / f"seed_{seed}"
            per_seed.append(
                run_single(
                    manifest,
                    frozenset(plan.stages),
                    seed,
                    run_dir,
                    overrides=overrides,
                    score_method=score_method,
                    encoder_dims=plan.encoder_dims,
                )
            )
        points.append(
            SweepPoint(
                value=float(value),
                fpr95_median=float(np.median([r.fpr95 for r in per_seed])),
                auroc_median=float(np.median([r.auroc for r in per_seed])),
            )
        )
    lines = [f"{axis},fpr95_median,auroc_median"]
    for p in points:
        lines.append(f"{p.value!r},{p.fpr95_median!r},{p.auroc_median!r}")
    (out / f"sweep_{axis}.csv").write_text("\n".join(lines) + "\n")
    return points
