"""Bipartite assignment of object queries to ground-truth and pseudo targets.

Pseudo targets participate in the matching cost with full box terms but are
excluded from box regression supervision downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box, giou_pairs

__all__ = ["Target", "Assignment", "CostWeights", "match", "split_supervision"]


@dataclass(frozen=True)
class Target:
    """A matching target: a base ground-truth box or a pseudo box.

    ``index`` is a base class index in [0, M) for kind "base", or an index
    into the batch's pseudo-label list in [0, K) for kind "pseudo".
    """

    box: Box
    kind: str
    index: int

    def __post_init__(self):
        if self.kind not in ("base", "pseudo"):
            raise ValueError(f"kind must be 'base' or 'pseudo', got {self.kind!r}")
        if self.index < 0:
            raise ValueError("target index must be >= 0")


@dataclass(frozen=True)
class Assignment:
    """One-to-one pairs (query_index, target_index); unmatched queries are background."""

    pairs: tuple[tuple[int, int], ...]

    def query_of(self) -> dict[int, int]:
        return {t: q for q, t in self.pairs}


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def target_column(target: Target, num_base: int) -> int:
    """Column of a target in the (M+K)-wide training classifier."""
    return target.index if target.kind == "base" else num_base + target.index


def match(
    pred_scores: np.ndarray,
    pred_boxes: np.ndarray,
    targets: list[Target],
    num_base: int,
    weights: CostWeights = CostWeights(),
) -> Assignment:
    """Minimum-cost one-to-one assignment of queries to targets.

    Cost per (query, target) combines the negated classification probability
    for the target's classifier column, the L1 distance between boxes, and
    the negated generalized IoU, for base and pseudo targets alike. Requires
    at least as many queries as targets.
    """
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    n_query = pred_boxes.shape[0]
    n_target = len(targets)
    if n_target == 0:
        return Assignment(pairs=())
    if n_query < n_target:
        raise ValueError(f"need at least {n_target} queries, got {n_query}")

    tgt_boxes = np.stack([t.box.as_array() for t in targets])
    cols = [target_column(t, num_base) for t in targets]

    cost_cls = -pred_scores[:, cols]
    cost_l1 = np.abs(pred_boxes[:, None, :] - tgt_boxes[None, :, :]).sum(axis=2)
    cost_giou = np.empty((n_query, n_target))
    for j in range(n_target):
        tiled = np.broadcast_to(tgt_boxes[j], (n_query, 4))
        cost_giou[:, j] = -giou_pairs(pred_boxes, tiled)

    cost = weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou
    rows, cols_idx = linear_sum_assignment(cost)
    pairs = tuple(sorted(zip(rows.tolist(), cols_idx.tolist())))
    return Assignment(pairs=pairs)


def split_supervision(
    assignment: Assignment, targets: list[Target]
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Split matched pairs into classification and box supervision.

    Every matched pair supervises classification; only base-kind pairs
    supervise box regression.
    """
    cls_pairs = list(assignment.pairs)
    box_pairs = [(q, t) for q, t in assignment.pairs if targets[t].kind == "base"]
    return cls_pairs, box_pairs
