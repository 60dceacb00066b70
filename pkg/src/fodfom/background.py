"""Background fake-OOD images: mean-filter blur of the detected foreground
box, gated on the foreground covering less than beta% of the image.

Images are uint8 arrays, (H, W) or (H, W, C) row-major. Boxes are half-open
pixel-coordinate tuples (x0, y0, x1, y1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import DetectionRecord

DECISION_EMITTED = "emitted"
DECISION_AREA_GATE = "skipped: area gate"
DECISION_NO_DETECTION = "skipped: no detection"


class OutOfBoundsBoxError(ValueError):
    pass


@dataclass
class BlurSpec:
    kernel_size: int = 50
    beta_percent: float = 50.0

    def __post_init__(self) -> None:
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if not 0.0 < self.beta_percent <= 100.0:
            raise ValueError(f"beta_percent must be in (0, 100], got {self.beta_percent}")


@dataclass
class BackgroundDecision:
    image_id: str
    decision: str
    box: tuple[float, float, float, float] | None
    fraction: float | None


def _check_box(img: np.ndarray, box) -> None:
    h, w = img.shape[:2]
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise OutOfBoundsBoxError(f"box {box} outside {w}x{h} image")


def foreground_fraction(img: np.ndarray, box) -> float:
    """Box area over image area, half-open pixel coordinates."""
    _check_box(img, box)
    h, w = img.shape[:2]
    x0, y0, x1, y1 = box
    return ((x1 - x0) * (y1 - y0)) / (w * h)


def blur_box(img: np.ndarray, box, kernel_size: int) -> np.ndarray:
    """Mean-filter the pixels inside `box`; everything outside is untouched.

    The k x k window around pixel p spans offsets [-floor((k-1)/2), floor(k/2)]
    in both axes (asymmetric for even k), is clipped to the image, and the mean
    is taken over the in-image pixels only. Quantization rounds half away from
    zero. Sums run over an int64 integral image, so the result is exact.
    """
    if kernel_size < 1:
        raise ValueError(f"kernel_size must be >= 1, got {kernel_size}")
    _check_box(img, box)
    h, w = img.shape[:2]
    squeeze = img.ndim == 2
    planes = img[:, :, None] if squeeze else img

    x0, y0, x1, y1 = box
    xa, ya = int(math.floor(x0)), int(math.floor(y0))
    xb, yb = int(math.ceil(x1)), int(math.ceil(y1))

    lo = -((kernel_size - 1) // 2)
    hi = kernel_size // 2

    integral = np.zeros((h + 1, w + 1, planes.shape[2]), dtype=np.int64)
    integral[1:, 1:] = planes.astype(np.int64).cumsum(axis=0).cumsum(axis=1)

    ys = np.arange(ya, yb)
    xs = np.arange(xa, xb)
    ylo = np.clip(ys + lo, 0, h - 1)
    yhi = np.clip(ys + hi, 0, h - 1)
    xlo = np.clip(xs + lo, 0, w - 1)
    xhi = np.clip(xs + hi, 0, w - 1)

    sums = (
        integral[np.ix_(yhi + 1, xhi + 1)]
        - integral[np.ix_(ylo, xhi + 1)]
        - integral[np.ix_(yhi + 1, xlo)]
        + integral[np.ix_(ylo, xlo)]
    )
    counts = ((yhi - ylo + 1)[:, None] * (xhi - xlo + 1)[None, :])[:, :, None]
    # round half away from zero; sums are nonnegative so this is round half up
    means = (2 * sums + counts) // (2 * counts)

    out = planes.copy()
    out[ya:yb, xa:xb] = means.astype(np.uint8)
    return out[:, :, 0] if squeeze else out


def make_background(
    img: np.ndarray, detection: DetectionRecord, spec: BlurSpec
) -> tuple[np.ndarray | None, BackgroundDecision]:
    """Blur the highest-confidence box when the area gate passes.

    Emits only when the foreground fraction is strictly below beta%/100.
    """
    if not detection.boxes:
        return None, BackgroundDecision(detection.image_id, DECISION_NO_DETECTION, None, None)
    best = max(
        range(len(detection.boxes)), key=lambda i: (detection.boxes[i].confidence, -i)
    )
    b = detection.boxes[best]
    box = (b.x0, b.y0, b.x1, b.y1)
    fraction = foreground_fraction(img, box)
    if fraction < spec.beta_percent / 100.0:
        blurred = blur_box(img, box, spec.kernel_size)
        return blurred, BackgroundDecision(detection.image_id, DECISION_EMITTED, box, fraction)
    return None, BackgroundDecision(detection.image_id, DECISION_AREA_GATE, box, fraction)


def write_decisions_jsonl(decisions: list[BackgroundDecision], path: str | Path) -> None:
    with open(path, "w") as f:
        for d in decisions:
            f.write(
                json.dumps(
                    {
                        "image_id": d.image_id,
                        "decision": d.decision,
                        "box": list(d.box) if d.box is not None else None,
                        "fraction": d.fraction,
                    }
                )
                + "\n"
            )
