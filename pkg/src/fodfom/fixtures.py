"""Deterministic synthetic fixtures: Gaussian ID clusters, held-out OOD
clusters at unseen positions, and stripe-coded PNGs so the background-image
stage has something real to blur.

Each training row is rendered as vertical stripes whose gray levels encode
the feature vector, plus a centered foreground square carrying per-row
texture. Blurring the square destroys the texture and smears the stripes,
so featurizing a blurred image lands near, but off, the ID clusters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .tensorio import (
    CaptionRecord,
    BoundingBox,
    DetectionRecord,
    Hyperparams,
    Manifest,
    OptimizerSchedule,
    save_manifest,
    write_captions_jsonl,
    write_detections_jsonl,
    write_labels,
    write_tensor,
)

FOREGROUND_AREA = 0.4  # fraction of the image the foreground square covers


@dataclass
class SyntheticFixtureSpec:
    num_classes: int = 3
    samples_per_class: int = 60
    feature_dim: int = 8
    spread: float = 2.5
    noise: float = 1.0
    ring_radius: float = 5.0  # shell radius for unseen OOD cluster centers
    test_samples_per_class: int = 25
    ood_clusters: int = 6
    ood_samples_per_cluster: int = 25
    image_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.num_classes}")
        if self.feature_dim < 2:
            raise ValueError(f"need dim >= 2, got {self.feature_dim}")
        if self.samples_per_class < 1 or self.test_samples_per_class < 1:
            raise ValueError("need at least one sample per class")
        if self.noise <= 0 or self.spread <= 0 or self.ring_radius <= 0:
            raise ValueError("spread, noise, and ring_radius must be positive")

    @property
    def pixel_scale(self) -> float:
        # keep encoded features inside u8 range for the given geometry
        return 96.0 / (self.spread + 3.0 * self.noise)


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _class_centers(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    if n <= dim:
        # orthonormal directions guarantee separation sqrt(2)*radius
        q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
        return radius * q[:, :n].T
    return radius * _unit_rows(rng, n, dim)


def _unseen_directions(
    rng: np.random.Generator, n: int, dim: int, id_centers: np.ndarray
) -> np.ndarray:
    """Unit directions for unseen OOD clusters, mixed difficulty.

    Alternates hard clusters (outward along a jittered ID-class direction,
    where an ID-only head extrapolates confidently) with easy ones (random
    directions). The hard half is what fake-OOD training is able to fix.
    """
    id_dirs = id_centers / np.linalg.norm(id_centers, axis=1, keepdims=True)
    out = np.empty((n, dim))
    for k in range(n):
        if k % 3 == 0:
            raw = id_dirs[(k // 3) % len(id_dirs)] + 0.35 * _unit_rows(rng, 1, dim)[0]
            scale = 1.0
        else:
            raw = _unit_rows(rng, 1, dim)[0]
            scale = 1.25  # easy clusters sit a little further out
        out[k] = scale * raw / np.linalg.norm(raw)
    return out


def render_image(
    feature: np.ndarray, image_size: int, pixel_scale: float, rng: np.random.Generator
) -> np.ndarray:
    """Stripe-coded RGB image with a textured centered foreground square."""
    d = len(feature)
    img = np.zeros((image_size, image_size), dtype=np.float64)
    for stripe in range(d):
        c0 = stripe * image_size // d
        c1 = (stripe + 1) * image_size // d
        img[:, c0:c1] = 128.0 + pixel_scale * feature[stripe]
    x0, y0, x1, y1 = foreground_box(image_size)
    img[y0:y1, x0:x1] += rng.integers(-16, 17, size=(y1 - y0, x1 - x0))
    gray = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def foreground_box(image_size: int) -> tuple[int, int, int, int]:
    side = int(round(np.sqrt(FOREGROUND_AREA) * image_size))
    x0 = (image_size - side) // 2
    return (x0, x0, x0 + side, x0 + side)


def featurize_image(img: np.ndarray, feature_dim: int, pixel_scale: float) -> np.ndarray:
    """Invert the stripe coding: per-stripe gray means back to feature space."""
    gray = img.astype(np.float64).mean(axis=2) if img.ndim == 3 else img.astype(np.float64)
    w = gray.shape[1]
    out = np.empty(feature_dim)
    for stripe in range(feature_dim):
        c0 = stripe * w // feature_dim
        c1 = (stripe + 1) * w // feature_dim
        out[stripe] = (gray[:, c0:c1].mean() - 128.0) / pixel_scale
    return out


def gen_fixture(spec: SyntheticFixtureSpec, out_dir: str | Path) -> Manifest:
    """Write the full fixture (tensors, JSONL, images, manifest) to `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images_dir = out / "images"
    images_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    centers = _class_centers(rng, spec.num_classes, spec.feature_dim, spec.spread)

    def sample(center: np.ndarray, n: int) -> np.ndarray:
        return center + spec.noise * rng.standard_normal((n, spec.feature_dim))

    train = np.concatenate([sample(c, spec.samples_per_class) for c in centers])
    train_labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    id_test = np.concatenate([sample(c, spec.test_samples_per_class) for c in centers])
    id_test_labels = np.repeat(np.arange(spec.num_classes), spec.test_samples_per_class)

    ood_centers = spec.ring_radius * _unseen_directions(
        rng, spec.ood_clusters, spec.feature_dim, centers
    )
    ood_test = np.concatenate(
        [sample(c, spec.ood_samples_per_cluster) for c in ood_centers]
    )

    write_tensor(train.astype(np.float32), out / "embeddings.fodf")
    write_labels(train_labels, out / "labels.fodf")
    write_tensor(id_test.astype(np.float32), out / "id_test_embeddings.fodf")
    write_labels(id_test_labels, out / "id_test_labels.fodf")
    write_tensor(ood_test.astype(np.float32), out / "ood_test_embeddings.fodf")

    captions = []
    detections = []
    box = foreground_box(spec.image_size)
    for row in range(train.shape[0]):
        image_id = f"{row:05d}"
        img = render_image(train[row], spec.image_size, spec.pixel_scale, rng)
        Image.fromarray(img).save(images_dir / f"{image_id}.png")
        captions.append(
            CaptionRecord(
                image_id=image_id,
                class_index=int(train_labels[row]),
                blip_caption=f"a striped pattern of class {int(train_labels[row])}",
            )
        )
        detections.append(
            DetectionRecord(
                image_id=image_id,
                boxes=[BoundingBox(box[0], box[1], box[2], box[3], confidence=0.9)],
            )
        )
    write_captions_jsonl(captions, out / "captions.jsonl")
    write_detections_jsonl(detections, out / "detections.jsonl")

    with open(out / "fixture_spec.json", "w") as f:
        json.dump(asdict(spec), f, indent=2, sort_keys=True)
        f.write("\n")

    manifest = Manifest(
        dataset="synthetic-fixture",
        num_classes=spec.num_classes,
        class_names=[f"class_{c}" for c in range(spec.num_classes)],
        paths={
            "embeddings": "embeddings.fodf",
            "labels": "labels.fodf",
            "id_test_embeddings": "id_test_embeddings.fodf",
            "id_test_labels": "id_test_labels.fodf",
            "ood_test_embeddings": "ood_test_embeddings.fodf",
            "captions": "captions.jsonl",
            "detections": "detections.jsonl",
            "images": "images",
            "fixture_spec": "fixture_spec.json",
        },
        hyperparams=Hyperparams(
            alpha=30.0,
            gammas=(1.0 * spec.noise, 2.0 * spec.noise, 3.0 * spec.noise),
            beta=50.0,
            kernel_size=50,
            tau=0.1,
            lam=1.0,
            seed=spec.seed,
            optimizer=OptimizerSchedule(
                base_lr=0.02,
                warmup_epochs=10,
                warmup_start_lr=0.01,
                milestones=(35, 50),
                decay_factor=10.0,
                momentum=0.9,
                weight_decay=1e-4,
                batch_size=128,
                epochs=60,
            ),
        ),
        root=out,
    )
    save_manifest(manifest, out / "manifest.json")
    return manifest


def load_fixture_spec(path: str | Path) -> SyntheticFixtureSpec:
    doc = json.loads(Path(path).read_text())
    return SyntheticFixtureSpec(**doc)
