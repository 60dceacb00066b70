"""FPR95 / AUROC over ID and OOD score sets, ROC curves, and report tables.

Scores follow the higher-is-more-ID convention; a sample scoring at or above
the threshold counts as ID.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Tie-corrected Mann-Whitney statistic via average ranks, O(n log n)."""
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be non-empty")
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[: a.size].sum()
    return float((rank_sum - a.size * (a.size + 1) / 2.0) / (a.size * b.size))


def _min_id_count(tpr_target: float, n: int) -> int:
    """Smallest k with k/n >= target, robust to float rounding of target*n."""
    k0 = int(math.floor(tpr_target * n))
    for k in range(max(k0 - 1, 0), n + 1):
        if k / n >= tpr_target:
            return max(k, 1)
    return n


def fpr_at_tpr(
    id_scores: np.ndarray, ood_scores: np.ndarray, tpr_target: float = 0.95
) -> float:
    """OOD false-positive rate at the loosest threshold reaching the ID TPR.

    The threshold is the largest score value keeping at least target*N_id ID
    samples at or above it; OOD samples at or above it are false positives.
    """
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be non-empty")
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    k = _min_id_count(tpr_target, a.size)
    threshold = np.sort(a)[::-1][k - 1]
    return float(np.count_nonzero(b >= threshold) / b.size)


def roc_points(
    id_scores: np.ndarray, ood_scores: np.ndarray
) -> list[tuple[float, float, float]]:
    """(threshold, tpr, fpr) at every distinct score, thresholds descending."""
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    thresholds = np.unique(np.concatenate([a, b]))[::-1]
    points = []
    for t in thresholds:
        tpr = np.count_nonzero(a >= t) / a.size
        fpr = np.count_nonzero(b >= t) / b.size
        points.append((float(t), float(tpr), float(fpr)))
    return points


@dataclass
class ScoredSplit:
    """ID scores plus one or more named OOD score sets.

    +inf sentinels (from the msp_ratio zero-probability case) are mapped to
    the largest finite score present so rank metrics stay defined; the count
    of replaced values is kept for the report.
    """

    id_scores: np.ndarray
    ood_scores: dict[str, np.ndarray]
    replaced_inf: int = 0

    def __post_init__(self) -> None:
        arrays = [np.asarray(self.id_scores, dtype=np.float64)] + [
            np.asarray(v, dtype=np.float64) for v in self.ood_scores.values()
        ]
        if any(np.isnan(arr).any() for arr in arrays):
            raise ValueError("scores contain NaN")
        finite_max = max(
            (arr[np.isfinite(arr)].max() for arr in arrays if np.isfinite(arr).any()),
            default=0.0,
        )
        replaced = 0
        cleaned = []
        for arr in arrays:
            infs = np.isposinf(arr)
            replaced += int(infs.sum())
            out = arr.copy()
            out[infs] = finite_max
            cleaned.append(out)
        self.id_scores = cleaned[0]
        self.ood_scores = dict(zip(self.ood_scores.keys(), cleaned[1:]))
        self.replaced_inf = replaced


@dataclass
class EvalRow:
    name: str
    fpr95: float
    auroc: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    average: EvalRow
    config_hash: str
    roc: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)
    replaced_inf: int = 0


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def make_report(
    split: ScoredSplit, config: dict | None = None, tpr_target: float = 0.95
) -> EvalReport:
    """Per-OOD-set FPR95/AUROC plus the macro average row."""
    if not split.ood_scores:
        raise ValueError("need at least one OOD score set")
    rows = []
    roc = {}
    for name, scores in split.ood_scores.items():
        rows.append(
            EvalRow(
                name=name,
                fpr95=fpr_at_tpr(split.id_scores, scores, tpr_target),
                auroc=auroc(split.id_scores, scores),
            )
        )
        roc[name] = roc_points(split.id_scores, scores)
    average = EvalRow(
        name="average",
        fpr95=sum(r.fpr95 for r in rows) / len(rows),
        auroc=sum(r.auroc for r in rows) / len(rows),
    )
    return EvalReport(
        rows=rows,
        average=average,
        config_hash=config_hash(config or {}),
        roc=roc,
        replaced_inf=split.replaced_inf,
    )


def render_csv(report: EvalReport) -> str:
    lines = ["ood_set,fpr95,auroc"]
    for r in report.rows + [report.average]:
        lines.append(f"{r.name},{r.fpr95!r},{r.auroc!r}")
    return "\n".join(lines) + "\n"


def render_markdown(report: EvalReport) -> str:
    lines = [
        "| OOD set | FPR95 (%) | AUROC (%) |",
        "| --- | --- | --- |",
    ]
    for r in report.rows + [report.average]:
        lines.append(f"| {r.name} | {100.0 * r.fpr95:.2f} | {100.0 * r.auroc:.2f} |")
    lines.append("")
    lines.append(f"config hash: `{report.config_hash}`")
    if report.replaced_inf:
        lines.append(f"(+inf scores mapped to max finite: {report.replaced_inf})")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_prefix: str | Path) -> list[Path]:
    """Write <prefix>.csv, <prefix>.md, and one ROC CSV per OOD set."""
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = prefix.with_suffix(".csv")
    csv_path.write_text(render_csv(report))
    written.append(csv_path)
    md_path = prefix.with_suffix(".md")
    md_path.write_text(render_markdown(report))
    written.append(md_path)
    for name, points in report.roc.items():
        roc_path = prefix.parent / f"{prefix.stem}_roc_{name}.csv"
        with open(roc_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold", "tpr", "fpr"])
            for t, tpr, fpr in points:
                writer.writerow([repr(t), repr(tpr), repr(fpr)])
        written.append(roc_path)
    return written
