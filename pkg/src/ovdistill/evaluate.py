"""Evaluation: per-class average precision at IoU 0.5 with all-point
interpolation, plus the novel-object error decomposition.

The error report counts, over all novel ground-truth objects: how many are
covered by any query box at all (recalled), how many are covered by a box
surviving the top-score selection (selected), and, for each selected object,
whether the best covering query's argmax class is a base class, a wrong
novel class, or the correct one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectorConfig, forward, load_checkpoint, prepare_image
from .ensemble import Classifier, Detection, EnsembleConfig, ensemble, postprocess, score_heads
from .geometry import Box, iou
from .losses import DistillConfig
from .world import SyntheticWorld

__all__ = [
    "ErrorAnalysisReport",
    "EvalResult",
    "average_precision",
    "match_detections",
    "evaluate_model",
    "evaluate_checkpoint",
]


@dataclass
class ErrorAnalysisReport:
    recall_count: int = 0
    selected_count: int = 0
    misclassified_as_base: int = 0
    wrong_novel: int = 0
    correct_novel: int = 0
    total_novel_gt: int = 0

    def check_invariant(self) -> None:
        categorized = self.misclassified_as_base + self.wrong_novel + self.correct_novel
        if self.selected_count < categorized:
            raise AssertionError("selected_count must cover all categorized objects")

    def correct_rate(self) -> float:
        """Fraction of selected novel objects classified correctly."""
        if self.selected_count == 0:
            return 0.0
        return self.correct_novel / self.selected_count

    def to_dict(self) -> dict:
        return {
            "recall_count": self.recall_count,
            "selected_count": self.selected_count,
            "misclassified_as_base": self.misclassified_as_base,
            "wrong_novel": self.wrong_novel,
            "correct_novel": self.correct_novel,
            "total_novel_gt": self.total_novel_gt,
        }


def match_detections(
    detections: list[tuple[float, str, Box]],
    gt_by_image: dict[str, list[Box]],
    iou_thresh: float = 0.5,
) -> list[bool]:
    """Greedy TP/FP flags for score-ordered detections of one class.

    Each detection is tried against the highest-IoU ground-truth box of its
    image; it is a true positive when that IoU reaches the threshold and the
    box is still unmatched.
    """
    matched: dict[str, set[int]] = {img: set() for img in gt_by_image}
    flags = []
    for _score, image_id, box in detections:
        gts = gt_by_image.get(image_id, [])
        best_iou, best_idx = 0.0, -1
        for idx, gt in enumerate(gts):
            v = iou(box, gt)
            if v > best_iou:
                best_iou, best_idx = v, idx
        if best_iou >= iou_thresh and best_idx not in matched.setdefault(image_id, set()):
            matched[image_id].add(best_idx)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(
    detections: list[tuple[float, str, Box]],
    gt_by_image: dict[str, list[Box]],
    iou_thresh: float = 0.5,
) -> float:
    """All-point interpolated average precision at the given IoU threshold.

    ``detections`` are (score, image_id, box) for a single class; they are
    sorted by descending score (stable, so earlier entries win ties).
    """
    n_gt = sum(len(v) for v in gt_by_image.values())
    if n_gt == 0:
        return 0.0
    ordered = sorted(detections, key=lambda d: -d[0])
    flags = match_detections(ordered, gt_by_image, iou_thresh)
    if not flags:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope from the right, summed over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for k in range(len(flags)):
        if flags[k]:
            ap += (recall[k] - prev_r) * envelope[k]
            prev_r = recall[k]
    return float(ap)


@dataclass
class EvalResult:
    per_class_ap: dict = field(default_factory=dict)
    base_map: float = 0.0
    novel_map: float = 0.0
    error_report: ErrorAnalysisReport = field(default_factory=ErrorAnalysisReport)
    detections: list = field(default_factory=list)  # (image_id, Detection, class name)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": dict(sorted(self.per_class_ap.items())),
            "base_map": self.base_map,
            "novel_map": self.novel_map,
            "error_report": self.error_report.to_dict(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_model(
    params: dict,
    det_cfg: DetectorConfig,
    world: SyntheticWorld,
    text_lookup,
    split: str = "eval",
    distill_cfg: DistillConfig | None = None,
    ens_cfg: EnsembleConfig | None = None,
    iou_thresh: float = 0.5,
    top_n: int = 100,
) -> EvalResult:
    """Run the detector over a split and score it against full annotations."""
    distill_cfg = distill_cfg or DistillConfig()
    ens_cfg = ens_cfg or EnsembleConfig()
    cfg = world.config
    size = cfg.image_size
    names = list(cfg.base_classes) + list(cfg.novel_classes)
    classifier = Classifier.build(
        [(name, text_lookup(name)) for name in names], num_base=len(cfg.base_classes)
    )
    base_mask = classifier.base_mask
    novel_set = set(cfg.novel_classes)

    annotations = world.annotations(split)
    if not annotations:
        raise ValueError(f"split {split!r} is empty")

    per_class_dets: dict[str, list] = {name: [] for name in names}
    report = ErrorAnalysisReport()
    all_rows: list = []

    for image_id in world.image_ids(split):
        inputs = prepare_image(world.pyramids[split][image_id])
        fw = forward(params, inputs, det_cfg)
        boxes_norm = fw.boxes[-1]
        queries = fw.vis[-1]
        projected = fw.qhat[-1]
        p_cls, p_dis = score_heads(
            queries, projected, classifier, distill_cfg.tau_ckd, distill_cfg.tau_cls
        )
        eps = 1e-12
        scores = ensemble(
            np.clip(p_cls, eps, 1 - eps),
            np.clip(p_dis, eps, 1 - eps),
            base_mask,
            ens_cfg.beta1,
            ens_cfg.beta2,
        )
        boxes_px = np.clip(boxes_norm, 0.0, 1.0) * size
        boxes_px[:, 2] = np.maximum(boxes_px[:, 2], boxes_px[:, 0] + 1e-6)
        boxes_px[:, 3] = np.maximum(boxes_px[:, 3], boxes_px[:, 1] + 1e-6)
        dets = postprocess(scores, boxes_px, top_n=top_n)
        for det in dets:
            name = classifier.names[det.class_index]
            per_class_dets[name].append((det.score, image_id, det.box))
            all_rows.append((image_id, det, name))

        _update_error_report(
            report, scores, boxes_px, dets, annotations[image_id], names, novel_set, iou_thresh
        )

    gt_by_class: dict[str, dict[str, list[Box]]] = {name: {} for name in names}
    for image_id, objs in annotations.items():
        for box, cls in objs:
            gt_by_class[cls].setdefault(image_id, []).append(box)

    per_class_ap = {}
    base_aps, novel_aps = [], []
    for name in names:
        if not gt_by_class[name]:
            continue  # class absent from this split
        ap = average_precision(per_class_dets[name], gt_by_class[name], iou_thresh)
        per_class_ap[name] = ap
        (novel_aps if name in novel_set else base_aps).append(ap)

    report.check_invariant()
    return EvalResult(
        per_class_ap=per_class_ap,
        base_map=float(np.mean(base_aps)) if base_aps else 0.0,
        novel_map=float(np.mean(novel_aps)) if novel_aps else 0.0,
        error_report=report,
        detections=all_rows,
    )


def _update_error_report(
    report: ErrorAnalysisReport,
    scores: np.ndarray,
    boxes_px: np.ndarray,
    dets: list[Detection],
    objects: list,
    names: list[str],
    novel_set: set,
    iou_thresh: float,
) -> None:
    novel_gts = [box for box, cls in objects if cls in novel_set]
    novel_cls = [cls for _box, cls in objects if cls in novel_set]
    if not novel_gts:
        return
    report.total_novel_gt += len(novel_gts)

    selected_queries = sorted({d.query_index for d in dets})
    argmax_cls = scores.argmax(axis=1)
    row_max = scores.max(axis=1)

    for gt_box, gt_cls in zip(novel_gts, novel_cls):
        covered = any(
            iou(Box.from_array(boxes_px[q]), gt_box) >= iou_thresh
            for q in range(boxes_px.shape[0])
        )
        if covered:
            report.recall_count += 1
        covering = [
            q for q in selected_queries
            if iou(Box.from_array(boxes_px[q]), gt_box) >= iou_thresh
        ]
        if not covering:
            continue
        report.selected_count += 1
        best_q = max(covering, key=lambda q: (row_max[q], -q))
        predicted = names[int(argmax_cls[best_q])]
        if predicted not in novel_set:
            report.misclassified_as_base += 1
        elif predicted != gt_cls:
            report.wrong_novel += 1
        else:
            report.correct_novel += 1


def evaluate_checkpoint(
    checkpoint_path,
    world: SyntheticWorld,
    text_lookup,
    split: str = "eval",
    distill_cfg: DistillConfig | None = None,
    ens_cfg: EnsembleConfig | None = None,
    iou_thresh: float = 0.5,
    top_n: int = 100,
) -> EvalResult:
    params, det_cfg, _meta = load_checkpoint(checkpoint_path)
    return evaluate_model(
        params, det_cfg, world, text_lookup,
        split=split, distill_cfg=distill_cfg, ens_cfg=ens_cfg,
        iou_thresh=iou_thresh, top_n=top_n,
    )
