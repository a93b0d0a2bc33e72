"""Classifier construction from text embeddings and dual-space score fusion.

At inference the classifier holds base followed by novel text embedding
columns. Text-space scores (projected queries at the classification
temperature) and visual-space scores (raw queries at the distillation
temperature) are fused by a geometric mean with separate exponents for base
and novel columns, computed in log space to avoid underflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import normalize
from .geometry import Box

__all__ = [
    "Classifier",
    "EnsembleConfig",
    "Detection",
    "ensemble",
    "score_heads",
    "postprocess",
    "write_detections",
    "read_detections",
]


@dataclass(frozen=True)
class Classifier:
    """Ordered (name, unit embedding) columns; the first num_base are base classes."""

    names: tuple[str, ...]
    matrix: np.ndarray
    num_base: int

    @classmethod
    def build(cls, named_vectors: list[tuple[str, np.ndarray]], num_base: int) -> "Classifier":
        names = tuple(n for n, _ in named_vectors)
        if len(set(names)) != len(names):
            raise ValueError("classifier names must be unique")
        if not (0 <= num_base <= len(names)):
            raise ValueError("num_base out of range")
        matrix = np.stack([normalize(v) for _, v in named_vectors])
        return cls(names=names, matrix=matrix, num_base=num_base)

    @property
    def base_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.names), dtype=bool)
        mask[: self.num_base] = True
        return mask

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class EnsembleConfig:
    """Fusion exponents for base (beta1) and novel (beta2) columns."""

    beta1: float = 0.35
    beta2: float = 0.65

    def __post_init__(self):
        if not (0.0 <= self.beta1 <= 1.0 and 0.0 <= self.beta2 <= 1.0):
            raise ValueError("beta coefficients must lie in [0, 1]")

    @classmethod
    def coco_preset(cls) -> "EnsembleConfig":
        return cls(beta1=0.35, beta2=0.65)

    @classmethod
    def lvis_preset(cls) -> "EnsembleConfig":
        return cls(beta1=0.25, beta2=0.45)


def ensemble(
    p_cls: np.ndarray,
    p_dis: np.ndarray,
    base_mask: np.ndarray,
    beta1: float,
    beta2: float,
) -> np.ndarray:
    """Columnwise geometric fusion: p_cls^(1-beta) * p_dis^beta.

    Base columns use beta1, the rest beta2. Inputs must be strictly inside
    (0, 1); the result is monotone in both arguments and reduces to either
    input at beta 0 or 1.
    """
    p_cls = np.asarray(p_cls, dtype=np.float64)
    p_dis = np.asarray(p_dis, dtype=np.float64)
    if p_cls.shape != p_dis.shape:
        raise ValueError("score shapes must match")
    if np.any(p_cls <= 0) or np.any(p_cls >= 1) or np.any(p_dis <= 0) or np.any(p_dis >= 1):
        raise ValueError("probabilities must be strictly inside (0, 1)")
    base_mask = np.asarray(base_mask, dtype=bool)
    if base_mask.shape != (p_cls.shape[-1],):
        raise ValueError("base_mask must have one entry per column")
    beta = np.where(base_mask, float(beta1), float(beta2))
    return np.exp((1.0 - beta) * np.log(p_cls) + beta * np.log(p_dis))


def score_heads(
    queries: np.ndarray,
    projected_queries: np.ndarray,
    classifier: Classifier,
    tau_ckd: float = 20.0,
    tau_cls: float = 50.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Text-space and visual-space probabilities against the classifier columns.

    p_cls comes from the text-space projections at the classification
    temperature, p_dis from the visual-space queries at the distillation
    temperature.
    """
    if len(classifier) == 0:
        raise ValueError("classifier must be nonempty")

    def probs(rows: np.ndarray, tau: float) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[1] != classifier.matrix.shape[1]:
            raise ValueError("query dimension does not match classifier columns")
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero query vectors")
        cos = (rows / norms) @ classifier.matrix.T
        return 1.0 / (1.0 + np.exp(-tau * np.clip(cos, -1.0, 1.0)))

    return probs(projected_queries, tau_cls), probs(queries, tau_ckd)


@dataclass(frozen=True)
class Detection:
    query_index: int
    class_index: int
    score: float
    box: Box


def postprocess(scores: np.ndarray, boxes: np.ndarray, top_n: int = 100) -> list[Detection]:
    """Flatten (query, class) scores and keep the top_n.

    Sorted by descending score with deterministic (query index, class index)
    tie-breaking; the ranking is invariant to any strictly increasing
    transform of the scores.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n, c = scores.shape
    flat = [(-scores[q, k], q, k) for q in range(n) for k in range(c)]
    flat.sort()
    out = []
    for neg_score, q, k in flat[:top_n]:
        out.append(
            Detection(query_index=q, class_index=k, score=-neg_score, box=Box.from_array(boxes[q]))
        )
    return out


def write_detections(path, rows: list[tuple[str, Detection, str]]) -> None:
    """Write (image_id, detection, class_name) rows as tab-separated lines."""
    lines = []
    for image_id, det, class_name in rows:
        b = det.box
        lines.append(
            "\t".join(
                [image_id, repr(b.x1), repr(b.y1), repr(b.x2), repr(b.y2), class_name, repr(det.score)]
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path) -> list[tuple[str, Box, str, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image_id, x1, y1, x2, y2, class_name, score = line.split("\t")
        out.append(
            (image_id, Box(float(x1), float(y1), float(x2), float(y2)), class_name, float(score))
        )
    return out
