"""Axis-aligned box arithmetic and class-agnostic pseudo-box selection.

Boxes are half-open rectangles (x1, y1, x2, y2) in image coordinates with
exact area arithmetic (no +1 pixel convention), so results agree bit-for-bit
across implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Box",
    "Proposal",
    "iou",
    "iou_matrix",
    "giou_pairs",
    "filter_pseudo_proposals",
    "read_proposals",
    "write_proposals",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with strictly positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box must have positive area, got {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Proposal:
    """Class-agnostic region proposal with an objectness score in [0, 1]."""

    image_id: str
    box: Box
    objectness: float

    def __post_init__(self):
        object.__setattr__(self, "objectness", float(self.objectness))
        if not (0.0 <= self.objectness <= 1.0):
            raise ValueError(f"objectness must be in [0,1], got {self.objectness}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Symmetric, returns 0.0 for disjoint boxes and exactly 1.0 for identical
    ones. Degenerate boxes are rejected at construction time.
    """
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two sets of boxes given as (n,4) and (m,4) arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def giou_pairs(pred: np.ndarray, target: np.ndarray, return_grad: bool = False):
    """Generalized IoU for paired boxes, optionally with d(GIoU)/d(pred).

    ``pred`` and ``target`` are (n,4) arrays of matching rows. GIoU is
    IoU - (hull - union)/hull where hull is the smallest enclosing box.
    The gradient is piecewise (min/max selections) and valid almost
    everywhere; ties resolve to the pred side.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")

    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    area_p = pw * ph
    area_t = tw * th

    ix1 = np.maximum(p[:, 0], t[:, 0])
    iy1 = np.maximum(p[:, 1], t[:, 1])
    ix2 = np.minimum(p[:, 2], t[:, 2])
    iy2 = np.minimum(p[:, 3], t[:, 3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    overlap = (iw > 0.0) & (ih > 0.0)
    iw_c = np.where(overlap, iw, 0.0)
    ih_c = np.where(overlap, ih, 0.0)
    inter = iw_c * ih_c
    union = area_p + area_t - inter

    cx1 = np.minimum(p[:, 0], t[:, 0])
    cy1 = np.minimum(p[:, 1], t[:, 1])
    cx2 = np.maximum(p[:, 2], t[:, 2])
    cy2 = np.maximum(p[:, 3], t[:, 3])
    area_c = (cx2 - cx1) * (cy2 - cy1)

    iou_v = inter / union
    giou = iou_v - (area_c - union) / area_c
    if not return_grad:
        return giou

    # dI/dp through the max/min selections, zeroed when there is no overlap
    d_ix1 = (p[:, 0] >= t[:, 0]).astype(np.float64)
    d_iy1 = (p[:, 1] >= t[:, 1]).astype(np.float64)
    d_ix2 = (p[:, 2] <= t[:, 2]).astype(np.float64)
    d_iy2 = (p[:, 3] <= t[:, 3]).astype(np.float64)
    ov = overlap.astype(np.float64)
    dI = np.stack(
        [
            -ih_c * d_ix1 * ov,
            -iw_c * d_iy1 * ov,
            ih_c * d_ix2 * ov,
            iw_c * d_iy2 * ov,
        ],
        axis=1,
    )
    dAp = np.stack([-ph, -pw, ph, pw], axis=1)
    dU = dAp - dI

    # hull derivatives
    d_cx1 = (p[:, 0] <= t[:, 0]).astype(np.float64)
    d_cy1 = (p[:, 1] <= t[:, 1]).astype(np.float64)
    d_cx2 = (p[:, 2] >= t[:, 2]).astype(np.float64)
    d_cy2 = (p[:, 3] >= t[:, 3]).astype(np.float64)
    ch = cy2 - cy1
    cw = cx2 - cx1
    dAc = np.stack([-ch * d_cx1, -cw * d_cy1, ch * d_cx2, cw * d_cy2], axis=1)

    u = union[:, None]
    ac = area_c[:, None]
    d_iou = (dI * u - inter[:, None] * dU) / (u * u)
    dgiou = d_iou + dU / ac - u * dAc / (ac * ac)
    return giou, dgiou


def filter_pseudo_proposals(
    proposals: list[Proposal],
    gt_boxes: list[Box],
    max_iou: float = 0.5,
    top_k: int = 5,
) -> list[Box]:
    """Select pseudo boxes: top_k proposals by objectness not overlapping GT.

    Takes the ``top_k`` highest-objectness proposals (ties broken by input
    order), then discards any whose IoU with some ground-truth box exceeds
    ``max_iou``. Returned in descending objectness order.
    """
    if top_k < 0:
        raise ValueError("top_k must be >= 0")
    if not (0.0 <= max_iou <= 1.0):
        raise ValueError("max_iou must be in [0,1]")
    ranked = sorted(proposals, key=lambda pr: -pr.objectness)
    kept: list[Box] = []
    for pr in ranked[:top_k]:
        if any(iou(pr.box, g) > max_iou for g in gt_boxes):
            continue
        kept.append(pr.box)
    return kept


def write_proposals(path, proposals: list[Proposal]) -> None:
    """Write proposals as tab-separated lines: image_id, x1, y1, x2, y2, objectness."""
    lines = []
    for pr in proposals:
        b = pr.box
        lines.append(
            "\t".join(
                [pr.image_id, repr(b.x1), repr(b.y1), repr(b.x2), repr(b.y2), repr(pr.objectness)]
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_proposals(path) -> list[Proposal]:
    """Read proposals written by :func:`write_proposals`."""
    proposals = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image_id, x1, y1, x2, y2, objectness = line.split("\t")
        proposals.append(
            Proposal(image_id, Box(float(x1), float(y1), float(x2), float(y2)), float(objectness))
        )
    return proposals
