"""Desk-scale machinery for open-vocabulary detection via three-level
distillation from a frozen vision-language teacher: box geometry and
pseudo-box selection, embedding providers and cache, caption-based pseudo
text labels, bipartite matching, the distillation losses with analytic
gradients, dual-space score ensembling, and a synthetic end-to-end harness.
"""

from .embeddings import EmbeddingCache, MemoryQueue, StubProviders, cosine, normalize, queue_pad
from .ensemble import Classifier, EnsembleConfig, ensemble, postprocess, score_heads
from .geometry import Box, Proposal, filter_pseudo_proposals, iou
from .losses import (
    DistillConfig,
    LossReport,
    ckd_image,
    ckd_instance,
    classification_loss,
    global_feature,
    rkd_instance,
    total_loss,
)
from .matching import Assignment, Target, match, split_supervision
from .pseudolabels import (
    PseudoLabel,
    extract_noun_phrases,
    run_pipeline,
    select_pseudo_label,
    standardize_weights,
)
from .world import SyntheticWorld, WorldConfig, generate_world

__all__ = [
    "Box",
    "Proposal",
    "iou",
    "filter_pseudo_proposals",
    "normalize",
    "cosine",
    "MemoryQueue",
    "queue_pad",
    "EmbeddingCache",
    "StubProviders",
    "PseudoLabel",
    "extract_noun_phrases",
    "select_pseudo_label",
    "standardize_weights",
    "run_pipeline",
    "Target",
    "Assignment",
    "match",
    "split_supervision",
    "DistillConfig",
    "LossReport",
    "ckd_instance",
    "rkd_instance",
    "classification_loss",
    "global_feature",
    "ckd_image",
    "total_loss",
    "Classifier",
    "EnsembleConfig",
    "ensemble",
    "score_heads",
    "postprocess",
    "WorldConfig",
    "SyntheticWorld",
    "generate_world",
]
