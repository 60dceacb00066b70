"""Post-hoc OOD scores over (C+1)-logit outputs: max-softmax variants,
the energy score over the C ID logits, and ReAct activation clamping.

Convention everywhere: higher score means more ID-like.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trainer import ModelParams, encoder_forward, head_logits

METHODS = ("msp", "msp_pre_c", "msp_ratio", "energy", "react")


@dataclass
class ScoreConfig:
    method: str = "react"
    react_percentile: float = 90.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 < self.react_percentile < 100.0:
            raise ValueError(
                f"react_percentile must be in (0, 100), got {self.react_percentile}"
            )


@dataclass
class RectifyThreshold:
    clip_value: float
    percentile: float
    sample_count: int


def _logsumexp(values: np.ndarray) -> np.ndarray:
    m = values.max(axis=-1)
    return m + np.log(np.exp(values - m[..., None]).sum(axis=-1))


def energy_score(logits: np.ndarray, num_id_classes: int):
    """Negative energy: log-sum-exp of the first C logits, max-shifted."""
    if num_id_classes < 1:
        raise ValueError("need at least one ID class")
    arr = np.asarray(logits, dtype=np.float64)
    out = _logsumexp(arr[..., :num_id_classes])
    return float(out) if arr.ndim == 1 else out


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def msp_score(logits: np.ndarray, num_id_classes: int, variant: str = "msp"):
    """Max-softmax-probability scores.

    msp: softmax over the first C logits only, then max (the classic score).
    msp_pre_c: softmax over all C+1 logits, max over the first C.
    msp_ratio: msp_pre_c divided by the (C+1)-th probability; an exact zero
    there yields +inf, by convention the most ID-confident value possible.
    """
    if num_id_classes < 1:
        raise ValueError("need at least one ID class")
    arr = np.asarray(logits, dtype=np.float64)
    if variant == "msp":
        out = _softmax(arr[..., :num_id_classes]).max(axis=-1)
    elif variant == "msp_pre_c":
        out = _softmax(arr)[..., :num_id_classes].max(axis=-1)
    elif variant == "msp_ratio":
        p = _softmax(arr)
        with np.errstate(divide="ignore"):
            out = p[..., :num_id_classes].max(axis=-1) / p[..., num_id_classes]
    else:
        raise ValueError(f"unknown msp variant {variant!r}")
    return float(out) if arr.ndim == 1 else out


def estimate_rectify(id_features: np.ndarray, percentile: float = 90.0) -> RectifyThreshold:
    """Clip value = the given percentile of the flattened ID penultimate
    activations, with linear interpolation between order statistics.

    Must only ever see ID data; the threshold leaks label information
    otherwise.
    """
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    flat = np.asarray(id_features, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("cannot estimate a threshold from no samples")
    return RectifyThreshold(
        clip_value=float(np.percentile(flat, percentile, method="linear")),
        percentile=percentile,
        sample_count=flat.size,
    )


def react_score(
    params: ModelParams, features: np.ndarray, threshold: RectifyThreshold
):
    """Clamp penultimate activations at the ID-estimated value, then energy."""
    arr = np.asarray(features, dtype=np.float64)
    clamped = np.minimum(arr, threshold.clip_value)
    logits = head_logits(params, clamped)
    return energy_score(logits, params.num_classes)


def score_features(
    params: ModelParams,
    x: np.ndarray,
    config: ScoreConfig,
    rectify: RectifyThreshold | None = None,
) -> np.ndarray:
    """Score raw input features end to end: encode, then apply the method."""
    feat = encoder_forward(params, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    c = params.num_classes
    if config.method == "react":
        if rectify is None:
            raise ValueError("react scoring needs an ID-estimated rectify threshold")
        return np.asarray(react_score(params, feat, rectify))
    logits = head_logits(params, feat)
    if config.method == "energy":
        return np.asarray(energy_score(logits, c))
    return np.asarray(msp_score(logits, c, variant=config.method))


def estimate_rectify_from_inputs(
    params: ModelParams, id_inputs: np.ndarray, percentile: float = 90.0
) -> RectifyThreshold:
    """Convenience: run the encoder on raw ID inputs, then estimate the clip."""
    feat = encoder_forward(params, np.atleast_2d(np.asarray(id_inputs, dtype=np.float64)))
    return estimate_rectify(feat, percentile)
