"""Fake-outlier construction, (C+1)-class contrastive training, and
post-hoc OOD scoring over file-based embeddings, logits, and images."""

from .tensorio import (
    LabeledEmbeddingSet,
    Manifest,
    compose_caption,
    load_manifest,
    read_tensor,
    save_manifest,
    validate_manifest,
    write_tensor,
)
from .fake_embed import (
    FakeEmbeddingBatch,
    class_means,
    select_periphery,
    synthesize_fakes,
)
from .background import BlurSpec, blur_box, foreground_fraction, make_background
from .trainer import (
    ModelParams,
    TrainConfig,
    backward,
    forward,
    init_params,
    loss_ce,
    loss_supcon,
    sgd_step,
    train,
)
from .scoring import (
    ScoreConfig,
    energy_score,
    estimate_rectify,
    msp_score,
    react_score,
)
from .evalmetrics import ScoredSplit, auroc, fpr_at_tpr, make_report
from .fixtures import SyntheticFixtureSpec, gen_fixture

__all__ = [
    "LabeledEmbeddingSet",
    "Manifest",
    "compose_caption",
    "load_manifest",
    "read_tensor",
    "save_manifest",
    "validate_manifest",
    "write_tensor",
    "FakeEmbeddingBatch",
    "class_means",
    "select_periphery",
    "synthesize_fakes",
    "BlurSpec",
    "blur_box",
    "foreground_fraction",
    "make_background",
    "ModelParams",
    "TrainConfig",
    "backward",
    "forward",
    "init_params",
    "loss_ce",
    "loss_supcon",
    "sgd_step",
    "train",
    "ScoreConfig",
    "energy_score",
    "estimate_rectify",
    "msp_score",
    "react_score",
    "ScoredSplit",
    "auroc",
    "fpr_at_tpr",
    "make_report",
    "SyntheticFixtureSpec",
    "gen_fixture",
]

__version__ = "0.1.0"
