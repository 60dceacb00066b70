"""On-disk formats: FODF binary tensors, JSONL caption/detection records,
JSON manifests, and caption-prompt composition.

FODF layout (all little-endian):
    magic "FODF" | format version u16 | dtype code u8 (0 = f32) |
    ndim u8 | dims u64 x ndim | payload f32 row-major
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

MAGIC = b"FODF"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sHBB")


class TensorFormatError(Exception):
    """Base class for FODF read/write failures."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedFormatError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DimMismatchError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Write a float32 tensor to `path` in the FODF container."""
    arr = np.ascontiguousarray(t, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > 255:
        raise DimMismatchError(f"ndim must be in [1, 255], got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise DimMismatchError(f"dims must be positive, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path, validate: bool = True) -> np.ndarray:
    """Read a FODF tensor. With `validate`, rejects NaN/Inf elements."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a FODF file")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header cut short")
    _, version, dtype, ndim = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(f"{path}: format version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedFormatError(f"{path}: dtype code {dtype}")
    dims_end = _HEADER.size + 8 * ndim
    if len(blob) < dims_end:
        raise TruncatedPayloadError(f"{path}: dims cut short")
    dims = struct.unpack_from(f"<{ndim}Q", blob, _HEADER.size)
    if ndim == 0 or any(d == 0 for d in dims):
        raise DimMismatchError(f"{path}: dims must be positive, got {dims}")
    count = math.prod(dims)
    payload = blob[dims_end:]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, need {4 * count}"
        )
    if len(payload) > 4 * count:
        raise DimMismatchError(
            f"{path}: payload holds {len(payload)} bytes for dims {dims}"
        )
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(dims)
    if validate and not np.isfinite(arr).all():
        raise NonFiniteError(f"{path}: tensor contains NaN or Inf")
    return arr.copy()


def tensor_from_csv(path: str | Path) -> np.ndarray:
    """Import a hand-made fixture from CSV (one row per line) as float32."""
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return arr.astype(np.float32)


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    """Store integer labels as a [N] f32 tensor of exact small integers."""
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise DimMismatchError(f"labels must be 1-D, got shape {lab.shape}")
    write_tensor(lab.astype(np.float32), path)


def read_labels(path: str | Path, num_classes: int | None = None) -> np.ndarray:
    """Load labels, checking integrality and (optionally) range [0, C)."""
    arr = read_tensor(path)
    if arr.ndim != 1:
        raise DimMismatchError(f"{path}: labels must be 1-D, got shape {arr.shape}")
    rounded = np.rint(arr)
    if not np.array_equal(rounded, arr):
        raise ValueError(f"{path}: labels must hold exact integers")
    labels = rounded.astype(np.int64)
    if labels.min(initial=0) < 0:
        raise ValueError(f"{path}: negative label")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise ValueError(
            f"{path}: label {labels.max()} out of range for {num_classes} classes"
        )
    return labels


def compose_caption(class_name: str, blip_caption: str) -> str:
    """Prefix a caption with the class-specific prompt, prompt first."""
    if not class_name:
        raise ValueError("class_name must be non-empty")
    return f"This is a photo of {class_name} and {blip_caption}"


@dataclass
class CaptionRecord:
    image_id: str
    class_index: int
    blip_caption: str


@dataclass
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float
    confidence: float


@dataclass
class DetectionRecord:
    image_id: str
    boxes: list[BoundingBox]


def write_captions_jsonl(records: list[CaptionRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")


def read_captions_jsonl(
    path: str | Path, num_classes: int | None = None
) -> list[CaptionRecord]:
    records = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        rec = CaptionRecord(
            image_id=str(d["image_id"]),
            class_index=int(d["class_index"]),
            blip_caption=str(d["blip_caption"]),
        )
        if rec.image_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        if rec.class_index < 0 or (
            num_classes is not None and rec.class_index >= num_classes
        ):
            raise ValueError(
                f"{path}:{lineno}: class_index {rec.class_index} out of range"
            )
        records.append(rec)
    return records


def write_detections_jsonl(records: list[DetectionRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({"image_id": r.image_id, "boxes": [asdict(b) for b in r.boxes]}) + "\n")


def read_detections_jsonl(path: str | Path) -> list[DetectionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        boxes = []
        for b in d["boxes"]:
            box = BoundingBox(
                x0=float(b["x0"]),
                y0=float(b["y0"]),
                x1=float(b["x1"]),
                y1=float(b["y1"]),
                confidence=float(b["confidence"]),
            )
            if not 0.0 <= box.confidence <= 1.0:
                raise ValueError(f"{path}:{lineno}: confidence {box.confidence}")
            if box.x0 >= box.x1 or box.y0 >= box.y1:
                raise ValueError(f"{path}:{lineno}: degenerate box {b}")
            boxes.append(box)
        records.append(DetectionRecord(image_id=str(d["image_id"]), boxes=boxes))
    return records


@dataclass
class OptimizerSchedule:
    base_lr: float = 0.05
    warmup_epochs: int = 10
    warmup_start_lr: float = 0.01
    milestones: tuple[int, ...] = (100, 150)
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 512
    epochs: int = 200


@dataclass
class Hyperparams:
    alpha: float = 30.0
    gammas: tuple[float, ...] = (3e-5, 6e-5, 9e-5, 1.2e-4, 1.5e-4)
    beta: float = 50.0
    kernel_size: int = 50
    tau: float = 0.1
    lam: float = 1.0
    seed: int = 0
    optimizer: OptimizerSchedule = field(default_factory=OptimizerSchedule)


@dataclass
class Manifest:
    dataset: str
    num_classes: int
    class_names: list[str]
    paths: dict[str, str]
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    root: Path = field(default_factory=Path)

    def resolve(self, key: str) -> Path:
        return self.root / self.paths[key]


def save_manifest(m: Manifest, path: str | Path) -> None:
    doc = {
        "dataset": m.dataset,
        "num_classes": m.num_classes,
        "class_names": list(m.class_names),
        "paths": dict(m.paths),
        "hyperparameters": {
            "alpha": m.hyperparams.alpha,
            "gammas": list(m.hyperparams.gammas),
            "beta": m.hyperparams.beta,
            "kernel_size": m.hyperparams.kernel_size,
            "tau": m.hyperparams.tau,
            "lambda": m.hyperparams.lam,
            "seed": m.hyperparams.seed,
            "optimizer": asdict(m.hyperparams.optimizer),
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    hp = doc.get("hyperparameters", {})
    opt = hp.get("optimizer", {})
    sched = OptimizerSchedule(
        base_lr=float(opt.get("base_lr", 0.05)),
        warmup_epochs=int(opt.get("warmup_epochs", 10)),
        warmup_start_lr=float(opt.get("warmup_start_lr", 0.01)),
        milestones=tuple(int(x) for x in opt.get("milestones", (100, 150))),
        decay_factor=float(opt.get("decay_factor", 10.0)),
        momentum=float(opt.get("momentum", 0.9)),
        weight_decay=float(opt.get("weight_decay", 1e-4)),
        batch_size=int(opt.get("batch_size", 512)),
        epochs=int(opt.get("epochs", 200)),
    )
    hyper = Hyperparams(
        alpha=float(hp.get("alpha", 30.0)),
        gammas=tuple(float(g) for g in hp.get("gammas", (3e-5, 6e-5, 9e-5, 1.2e-4, 1.5e-4))),
        beta=float(hp.get("beta", 50.0)),
        kernel_size=int(hp.get("kernel_size", 50)),
        tau=float(hp.get("tau", 0.1)),
        lam=float(hp.get("lambda", 1.0)),
        seed=int(hp.get("seed", 0)),
        optimizer=sched,
    )
    return Manifest(
        dataset=str(doc["dataset"]),
        num_classes=int(doc["num_classes"]),
        class_names=[str(c) for c in doc.get("class_names", [])],
        paths={str(k): str(v) for k, v in doc.get("paths", {}).items()},
        hyperparams=hyper,
        root=path.parent,
    )


@dataclass
class Diagnostic:
    file: str
    field: str
    reason: str

    def __str__(self) -> str:
        return f"{self.file} [{self.field}]: {self.reason}"


def _check_hyperparams(hp: Hyperparams, out: list[Diagnostic]) -> None:
    def bad(fieldname: str, reason: str) -> None:
        out.append(Diagnostic("<manifest>", fieldname, reason))

    if not 0.0 < hp.alpha <= 100.0:
        bad("alpha", f"must be in (0, 100], got {hp.alpha}")
    if not 0.0 < hp.beta <= 100.0:
        bad("beta", f"must be in (0, 100], got {hp.beta}")
    if hp.kernel_size < 1:
        bad("kernel_size", f"must be >= 1, got {hp.kernel_size}")
    if hp.tau <= 0.0:
        bad("tau", f"must be > 0, got {hp.tau}")
    if hp.lam < 0.0:
        bad("lambda", f"must be >= 0, got {hp.lam}")
    if any(g < 0.0 for g in hp.gammas):
        bad("gammas", f"must be >= 0, got {hp.gammas}")
    ms = hp.optimizer.milestones
    if any(a >= b for a, b in zip(ms, ms[1:])):
        bad("optimizer.milestones", f"must be strictly increasing, got {ms}")
    if hp.optimizer.batch_size < 1:
        bad("optimizer.batch_size", f"must be >= 1, got {hp.optimizer.batch_size}")


def validate_manifest(m: Manifest) -> list[Diagnostic]:
    """Check every referenced file and invariant; empty list means valid."""
    out: list[Diagnostic] = []
    _check_hyperparams(m.hyperparams, out)
    if m.class_names and len(m.class_names) != m.num_classes:
        out.append(
            Diagnostic(
                "<manifest>",
                "class_names",
                f"{len(m.class_names)} names for {m.num_classes} classes",
            )
        )

    for key in m.paths:
        p = m.resolve(key)
        if not p.exists():
            out.append(Diagnostic(str(p), key, "file does not exist"))
    if out and any(d.reason == "file does not exist" for d in out):
        # Missing files make the content checks below moot for those keys.
        present = {k for k in m.paths if m.resolve(k).exists()}
    else:
        present = set(m.paths)

    emb = None
    if "embeddings" in present:
        try:
            emb = read_tensor(m.resolve("embeddings"))
            if emb.ndim != 2:
                out.append(
                    Diagnostic(
                        str(m.resolve("embeddings")),
                        "embeddings",
                        f"expected 2-D [N, D], got shape {emb.shape}",
                    )
                )
                emb = None
        except TensorFormatError as e:
            out.append(Diagnostic(str(m.resolve("embeddings")), "embeddings", str(e)))

    labels = None
    if "labels" in present:
        try:
            labels = read_labels(m.resolve("labels"), m.num_classes)
        except (TensorFormatError, ValueError) as e:
            out.append(Diagnostic(str(m.resolve("labels")), "labels", str(e)))
    if emb is not None and labels is not None:
        if len(labels) != emb.shape[0]:
            out.append(
                Diagnostic(
                    str(m.resolve("labels")),
                    "labels",
                    f"{len(labels)} labels for {emb.shape[0]} embedding rows",
                )
            )
        else:
            missing = set(range(m.num_classes)) - set(labels.tolist())
            if missing:
                out.append(
                    Diagnostic(
                        str(m.resolve("labels")),
                        "labels",
                        f"classes with no samples: {sorted(missing)}",
                    )
                )

    if "fake_embeddings" in present:
        try:
            fakes = read_tensor(m.resolve("fake_embeddings"))
            if fakes.ndim != 2:
                out.append(
                    Diagnostic(
                        str(m.resolve("fake_embeddings")),
                        "fake_embeddings",
                        f"expected 2-D, got shape {fakes.shape}",
                    )
                )
            elif emb is not None and fakes.shape[1] != emb.shape[1]:
                out.append(
                    Diagnostic(
                        str(m.resolve("fake_embeddings")),
                        "fake_embeddings",
                        f"dim {fakes.shape[1]} != embeddings dim {emb.shape[1]}",
                    )
                )
        except TensorFormatError as e:
            out.append(
                Diagnostic(str(m.resolve("fake_embeddings")), "fake_embeddings", str(e))
            )

    if "captions" in present:
        try:
            read_captions_jsonl(m.resolve("captions"), m.num_classes)
        except (ValueError, KeyError) as e:
            out.append(Diagnostic(str(m.resolve("captions")), "captions", str(e)))

    detections = None
    if "detections" in present:
        try:
            detections = read_detections_jsonl(m.resolve("detections"))
        except (ValueError, KeyError) as e:
            out.append(Diagnostic(str(m.resolve("detections")), "detections", str(e)))

    if "images" in present:
        images_dir = m.resolve("images")
        if not images_dir.is_dir():
            out.append(Diagnostic(str(images_dir), "images", "not a directory"))
        elif detections is not None:
            from PIL import Image

            for rec in detections:
                img_path = images_dir / f"{rec.image_id}.png"
                if not img_path.exists():
                    out.append(
                        Diagnostic(str(img_path), "detections", "referenced image missing")
                    )
                    continue
                with Image.open(img_path) as im:
                    w, h = im.size
                for b in rec.boxes:
                    if b.x0 < 0 or b.y0 < 0 or b.x1 > w or b.y1 > h:
                        out.append(
                            Diagnostic(
                                str(m.resolve("detections")),
                                "detections",
                                f"{rec.image_id}: box outside {w}x{h} image",
                            )
                        )
    return out


@dataclass
class LabeledEmbeddingSet:
    """N x D embeddings with per-row class labels and a class-name table."""

    embeddings: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self) -> None:
        if self.embeddings.ndim != 2:
            raise DimMismatchError(
                f"embeddings must be [N, D], got shape {self.embeddings.shape}"
            )
        if self.labels.shape != (self.embeddings.shape[0],):
            raise DimMismatchError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels "
                f"for {self.embeddings.shape[0]} rows"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("label out of range")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def from_manifest(cls, m: Manifest) -> "LabeledEmbeddingSet":
        emb = read_tensor(m.resolve("embeddings"))
        labels = read_labels(m.resolve("labels"), m.num_classes)
        names = m.class_names or [f"class_{i}" for i in range(m.num_classes)]
        return cls(embeddings=emb, labels=labels, class_names=names)
