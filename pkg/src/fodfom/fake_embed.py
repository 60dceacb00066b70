"""Per-class embedding statistics, periphery selection, and synthesis of
fake OOD text embeddings by an outward radial step from the class mean.

All geometry runs in float64; synthesized embeddings are stored as f32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import LabeledEmbeddingSet

METRICS = ("cosine", "euclidean", "mahalanobis")


class MissingClassError(ValueError):
    pass


class CovarianceNotInvertibleError(ValueError):
    pass


@dataclass
class ClassStats:
    class_index: int
    mean: np.ndarray  # float64 [D]
    count: int
    covariance: np.ndarray | None = None  # float64 [D, D], after shrinkage
    shrinkage: float | None = None


@dataclass
class PeripherySelection:
    class_index: int
    selected_row_indices: np.ndarray  # global row indices, periphery-most first
    threshold_value: float  # metric value of the boundary (last selected) row
    metric: str


@dataclass
class FakeProvenance:
    source_row: int
    class_index: int
    gamma: float


@dataclass
class FakeEmbeddingBatch:
    embeddings: np.ndarray  # f32 [M, D]
    provenance: list[FakeProvenance]
    warnings: list[str]


def class_means(
    dataset: LabeledEmbeddingSet,
    with_covariance: bool = False,
    shrinkage: float = 0.1,
) -> list[ClassStats]:
    """Per-class mean (and optionally shrunk covariance), accumulated in 64-bit.

    Covariance uses the unbiased 1/(n-1) estimator, then is shrunk toward its
    diagonal: (1 - rho) * Sigma + rho * diag(Sigma). Per-class covariance is
    singular whenever n_c <= D, so the shrinkage keeps Mahalanobis selection
    usable on small classes.
    """
    emb = dataset.embeddings.astype(np.float64)
    stats = []
    for c in range(dataset.num_classes):
        rows = emb[dataset.labels == c]
        if rows.shape[0] == 0:
            raise MissingClassError(f"class {c} has no samples")
        mean = rows.sum(axis=0) / rows.shape[0]
        cov = None
        if with_covariance:
            centered = rows - mean
            n = rows.shape[0]
            raw = (centered.T @ centered) / max(n - 1, 1)
            cov = (1.0 - shrinkage) * raw + shrinkage * np.diag(np.diag(raw))
        stats.append(
            ClassStats(
                class_index=c,
                mean=mean,
                count=rows.shape[0],
                covariance=cov,
                shrinkage=shrinkage if with_covariance else None,
            )
        )
    return stats


def _cosine_to_mean(rows: np.ndarray, mean: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1) * np.linalg.norm(mean)
    dots = rows @ mean
    out = np.zeros(len(rows))
    nonzero = norms > 0
    out[nonzero] = dots[nonzero] / norms[nonzero]
    return out


def _mahalanobis_to_mean(rows: np.ndarray, stats: ClassStats) -> np.ndarray:
    if stats.covariance is None:
        raise CovarianceNotInvertibleError(
            f"class {stats.class_index}: covariance not computed"
        )
    try:
        chol = np.linalg.cholesky(stats.covariance)
    except np.linalg.LinAlgError as e:
        raise CovarianceNotInvertibleError(
            f"class {stats.class_index}: covariance singular after shrinkage"
        ) from e
    diff = rows - stats.mean
    y = np.linalg.solve(chol, diff.T)
    return np.sqrt((y * y).sum(axis=0))


def periphery_count(alpha: float, n: int) -> int:
    """floor(alpha% of n), but at least one row."""
    return max(1, int(math.floor(alpha * n / 100.0 + 1e-9)))


def select_periphery(
    dataset: LabeledEmbeddingSet,
    stats: list[ClassStats],
    alpha: float,
    metric: str = "cosine",
) -> list[PeripherySelection]:
    """Pick the alpha% periphery rows of each class cluster.

    cosine: rows least similar to the class mean come first (ascending
    similarity). euclidean/mahalanobis: rows farthest from the mean come
    first (descending distance). Ties break toward the lower row index.
    """
    if not 0.0 < alpha <= 100.0:
        raise ValueError(f"alpha must be in (0, 100], got {alpha}")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    emb = dataset.embeddings.astype(np.float64)
    selections = []
    for st in stats:
        idx = np.flatnonzero(dataset.labels == st.class_index)
        rows = emb[idx]
        if metric == "cosine":
            values = _cosine_to_mean(rows, st.mean)
            order = np.argsort(values, kind="stable")  # ascending similarity
        elif metric == "euclidean":
            values = np.linalg.norm(rows - st.mean, axis=1)
            order = np.argsort(-values, kind="stable")  # descending distance
        else:
            values = _mahalanobis_to_mean(rows, st)
            order = np.argsort(-values, kind="stable")
        k = periphery_count(alpha, len(idx))
        chosen = order[:k]
        selections.append(
            PeripherySelection(
                class_index=st.class_index,
                selected_row_indices=idx[chosen],
                threshold_value=float(values[chosen[-1]]),
                metric=metric,
            )
        )
    return selections


def synthesize_fakes(
    dataset: LabeledEmbeddingSet,
    stats: list[ClassStats],
    selections: list[PeripherySelection],
    gammas: list[float] | tuple[float, ...],
) -> FakeEmbeddingBatch:
    """Step each periphery embedding outward along its unit direction from
    the class mean, once per step length gamma."""
    if any(g < 0 for g in gammas):
        raise ValueError(f"gammas must be >= 0, got {gammas}")
    means = {st.class_index: st.mean for st in stats}
    emb = dataset.embeddings.astype(np.float64)
    fakes: list[np.ndarray] = []
    provenance: list[FakeProvenance] = []
    warnings: list[str] = []
    for sel in selections:
        mu = means[sel.class_index]
        for row in sel.selected_row_indices:
            t = emb[row]
            diff = t - mu
            norm = np.linalg.norm(diff)
            if norm == 0.0:
                warnings.append(
                    f"row {int(row)} (class {sel.class_index}): "
                    "embedding equals class mean, skipped"
                )
                continue
            unit = diff / norm
            for g in gammas:
                fakes.append(t + g * unit)
                provenance.append(FakeProvenance(int(row), sel.class_index, float(g)))
    if fakes:
        batch = np.stack(fakes).astype(np.float32)
    else:
        batch = np.zeros((0, dataset.dim), dtype=np.float32)
    return FakeEmbeddingBatch(embeddings=batch, provenance=provenance, warnings=warnings)


def provenance_path(tensor_path: str | Path) -> Path:
    p = Path(tensor_path)
    return p.with_suffix(".provenance.jsonl")


def write_provenance(batch: FakeEmbeddingBatch, path: str | Path) -> None:
    with open(path, "w") as f:
        for p in batch.provenance:
            f.write(
                json.dumps(
                    {
                        "source_row": p.source_row,
                        "class_index": p.class_index,
                        "gamma": p.gamma,
                    }
                )
                + "\n"
            )


def normalize_rows(embeddings: np.ndarray) -> np.ndarray:
    """Optional L2 pre-normalization for adapters that deliver unnormalized rows."""
    emb = embeddings.astype(np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (emb / norms).astype(np.float32)
