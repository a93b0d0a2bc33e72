"""Training loop: per-layer bipartite matching, the three distillation
hierarchies plus detection losses, and plain fixed-step SGD.

Each step draws a batch of images, matches every decoder layer's predictions
to the union of base ground truth and pseudo boxes, pools matched pairs
across the batch for the instance losses, and pads negatives from the FIFO
memory queues (one per contrastive head). The per-step LossReport is
appended to a line-delimited metrics log; with fixed seeds two runs produce
byte-identical logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import (
    FROZEN_PARAMS,
    DetectorConfig,
    ImageInputs,
    backward,
    decode_boxes,
    forward,
    init_params,
    orthonormal_span,
    prepare_image,
    save_checkpoint,
    zero_grads,
)
from .embeddings import MemoryQueue, queue_pad, stable_seed
from .geometry import Box
from .losses import (
    DistillConfig,
    box_loss,
    build_classification_targets,
    ckd_image,
    ckd_instance,
    classification_loss,
    rkd_instance,
    total_loss,
)
from .matching import Assignment, CostWeights, Target, match, split_supervision
from .pseudolabels import PseudoLabel
from .world import SyntheticWorld

__all__ = ["TrainConfig", "TrainedModel", "build_examples", "train"]


@dataclass
class TrainConfig:
    steps: int = 400
    lr: float = 0.5
    batch_size: int = 2
    seed: int = 7
    # decoupled L2 decay per step: params *= (1 - lr * weight_decay); keeps
    # directions no loss term sustains (stray classifier logits) near zero
    weight_decay: float = 0.0
    # ablation toggles
    enable_ckd: bool = True
    enable_rkd: bool = True
    enable_pseudo_classes: bool = True
    enable_weighting: bool = True
    enable_image_distill: bool = True
    use_pseudo_boxes: bool = True
    distill_classes: str = "both"  # "base", "pseudo" or "both"
    distill_mode: str = "progressive"  # "progressive": every layer; "parallel": final layer only
    # one assignment per image per step instead of re-matching every decoder
    # layer, and matching on the query anchor (seed) boxes rather than the
    # per-layer refined boxes: both keep assignments stable across SGD steps,
    # which plain fixed-step SGD needs to converge at desk scale
    shared_matching: bool = True
    anchor_matching: bool = True
    # matching cost weights
    cost_cls: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    # box loss weights
    box_l1_weight: float = 5.0
    box_giou_weight: float = 2.0

    def __post_init__(self):
        if self.distill_classes not in ("base", "pseudo", "both"):
            raise ValueError(f"bad distill_classes {self.distill_classes!r}")
        if self.distill_mode not in ("progressive", "parallel"):
            raise ValueError(f"bad distill_mode {self.distill_mode!r}")


@dataclass
class _Example:
    """Preprocessed training image with its targets and teacher embeddings."""

    image_id: str
    inputs: ImageInputs
    boxes: np.ndarray  # (T, 4) normalized corners
    kinds: list[str]  # per target: "base" | "pseudo"
    base_cols: list[int | None]  # base class index or None
    labels: list[str | None]  # pseudo label or None
    label_embs: list[np.ndarray | None]
    pseudo_weights: list[float]
    region_matrix: np.ndarray  # (T, d)
    clip_global: np.ndarray  # (d,)


@dataclass
class TrainedModel:
    params: dict
    detector_config: DetectorConfig
    meta: dict
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


def build_examples(
    world: SyntheticWorld,
    pseudo_labels: list[PseudoLabel],
    pseudo_boxes: dict[str, list[Box]],
    region_lookup,
    text_lookup,
    global_lookup,
    use_pseudo_boxes: bool = True,
) -> list:
    """Assemble per-image training examples (targets, teacher embeddings)."""
    size = world.config.image_size
    base_index = {name: i for i, name in enumerate(world.config.base_classes)}
    records: dict[tuple, PseudoLabel] = {}
    for rec in pseudo_labels:
        records[(rec.image_id, rec.box.as_tuple())] = rec

    ann = world.annotations("train")
    examples = []
    for image_id in world.image_ids("train"):
        boxes_norm = []
        kinds, base_cols, labels, label_embs, weights, regions = [], [], [], [], [], []
        for box, cls in ann.get(image_id, []):
            boxes_norm.append(box.as_array() / size)
            kinds.append("base")
            base_cols.append(base_index[cls])
            labels.append(None)
            label_embs.append(None)
            weights.append(1.0)
            regions.append(region_lookup(image_id, box))
        if use_pseudo_boxes:
            for box in pseudo_boxes.get(image_id, []):
                rec = records.get((image_id, box.as_tuple()))
                boxes_norm.append(box.as_array() / size)
                kinds.append("pseudo")
                base_cols.append(None)
                labels.append(rec.label if rec else None)
                if rec is not None:
                    emb = rec.text_embedding
                    label_embs.append(emb if emb is not None else text_lookup(rec.label))
                else:
                    label_embs.append(None)
                weights.append(rec.weight if rec else 1.0)
                regions.append(region_lookup(image_id, box))
        examples.append(
            _Example(
                image_id=image_id,
                inputs=prepare_image(world.pyramids["train"][image_id]),
                boxes=np.array(boxes_norm).reshape(-1, 4),
                kinds=kinds,
                base_cols=base_cols,
                labels=labels,
                label_embs=label_embs,
                pseudo_weights=weights,
                region_matrix=(
                    np.stack(regions) if regions else np.zeros((0, world.config.embed_dim))
                ),
                clip_global=global_lookup(image_id),
            )
        )
    return examples


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _cosine_rows(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    rn = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    cn = cols / np.linalg.norm(cols, axis=1, keepdims=True)
    return rn @ cn.T


def _batch_columns(batch, enable_pseudo: bool, enable_weighting: bool):
    """Unique pseudo-label columns for this batch.

    Boxes sharing a label share one column; the column weight is the largest
    confidence among them. Unlabeled pseudo targets get no column.
    """
    labels: list[str] = []
    embs: list[np.ndarray] = []
    weights: list[float] = []
    pos: dict[str, int] = {}
    if enable_pseudo:
        for ex in batch:
            for kind, lab, emb, w in zip(ex.kinds, ex.labels, ex.label_embs, ex.pseudo_weights):
                if kind != "pseudo" or lab is None:
                    continue
                if lab not in pos:
                    pos[lab] = len(labels)
                    labels.append(lab)
                    embs.append(emb)
                    weights.append(w)
                else:
                    weights[pos[lab]] = max(weights[pos[lab]], w)
    if not enable_weighting:
        weights = [1.0] * len(weights)
    return labels, embs, weights, pos


def _step_targets(ex, label_pos: dict, num_labeled: int, unlabeled_start: int):
    """Per-image Target list with batch-level column indices.

    Labeled pseudo targets point at their shared label column; unlabeled ones
    get throwaway columns after the labeled block (zero scores, so only box
    terms drive their matching cost). Returns (targets, next unlabeled slot).
    """
    targets = []
    slot = unlabeled_start
    for i in range(len(ex.kinds)):
        box = Box.from_array(ex.boxes[i])
        if ex.kinds[i] == "base":
            targets.append(Target(box=box, kind="base", index=ex.base_cols[i]))
        elif ex.labels[i] is not None:
            targets.append(Target(box=box, kind="pseudo", index=label_pos[ex.labels[i]]))
        else:
            targets.append(Target(box=box, kind="pseudo", index=slot))
            slot += 1
    return targets, slot


def train(
    world: SyntheticWorld,
    pseudo_labels: list[PseudoLabel],
    pseudo_boxes: dict[str, list[Box]],
    region_lookup,
    text_lookup,
    global_lookup,
    det_cfg: DetectorConfig,
    distill_cfg: DistillConfig,
    train_cfg: TrainConfig,
    out_dir,
) -> TrainedModel:
    """Run SGD on the total loss and write checkpoint plus metrics log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    examples = build_examples(
        world,
        pseudo_labels if train_cfg.enable_pseudo_classes else [],
        pseudo_boxes,
        region_lookup,
        text_lookup,
        global_lookup,
        use_pseudo_boxes=train_cfg.use_pseudo_boxes,
    )
    channels = world.config.channels
    num_base = len(world.config.base_classes)
    base_matrix = np.stack([text_lookup(name) for name in world.config.base_classes])
    dim = base_matrix.shape[1]

    # embedding heads are confined to the span of the text directions that
    # appear in training (base classes, the dataset's pseudo labels, and the
    # cone center), so unseen classifier columns score at chance at eval time
    span_rows = [base_matrix, base_matrix.mean(axis=0, keepdims=True)]
    if train_cfg.enable_pseudo_classes and pseudo_labels:
        seen = set()
        rows = []
        for rec in pseudo_labels:
            if rec.label in seen:
                continue
            seen.add(rec.label)
            emb = rec.text_embedding if rec.text_embedding is not None else text_lookup(rec.label)
            rows.append(emb)
        span_rows.append(np.stack(rows))
    span = orthonormal_span(np.concatenate(span_rows, axis=0))

    params = init_params(
        det_cfg,
        channels,
        seed=stable_seed(train_cfg.seed, "init"),
        span=span,
        num_levels=len(world.config.level_shapes),
    )
    rng = np.random.Generator(np.random.PCG64(stable_seed(train_cfg.seed, "batches")))
    cost_weights = CostWeights(train_cfg.cost_cls, train_cfg.cost_l1, train_cfg.cost_giou)
    instance_queue = MemoryQueue(distill_cfg.instance_queue_capacity, dim)
    image_queue = MemoryQueue(distill_cfg.image_queue_capacity, dim)
    num_layers = det_cfg.num_layers

    metrics_path = out / "metrics.jsonl"
    order: list[int] = []
    with metrics_path.open("w") as metrics:
        for step in range(train_cfg.steps):
            while len(order) < train_cfg.batch_size:
                order.extend(rng.permutation(len(examples)).tolist())
            batch = [examples[i] for i in order[: train_cfg.batch_size]]
            order = order[train_cfg.batch_size :]

            report, grads = _train_step(
                params, batch, base_matrix, num_base,
                instance_queue, image_queue, cost_weights,
                det_cfg, distill_cfg, train_cfg,
            )
            decay = 1.0 - train_cfg.lr * train_cfg.weight_decay
            for key in params:
                if key in FROZEN_PARAMS:
                    continue
                if decay != 1.0:
                    params[key] *= decay
                params[key] -= train_cfg.lr * grads[key]
            line = {"step": step, **report.to_dict()}
            metrics.write(json.dumps(line, sort_keys=True) + "\n")

    meta = {
        "steps": train_cfg.steps,
        "channels": channels,
        "num_base": num_base,
        "base_classes": list(world.config.base_classes),
        "novel_classes": list(world.config.novel_classes),
        "image_size": world.config.image_size,
    }
    ckpt_path = out / "checkpoint.npz"
    save_checkpoint(ckpt_path, params, det_cfg, meta)
    return TrainedModel(
        params=params,
        detector_config=det_cfg,
        meta=meta,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
    )


def _train_step(
    params, batch, base_matrix, num_base,
    instance_queue, image_queue, cost_weights,
    det_cfg, distill_cfg, train_cfg,
):
    m = len(batch)
    num_layers = det_cfg.num_layers
    labels, label_embs, label_weights, label_pos = _batch_columns(
        batch, train_cfg.enable_pseudo_classes, train_cfg.enable_weighting
    )
    n_labeled = len(labels)
    class_matrix = (
        np.concatenate([base_matrix, np.stack(label_embs)]) if labels else base_matrix
    )
    colw = np.concatenate([np.ones(num_base), np.array(label_weights, dtype=np.float64)])
    n_columns = num_base + n_labeled

    # per-image targets with batch-level columns
    all_targets = []
    slot = n_labeled
    for ex in batch:
        targets, slot = _step_targets(ex, label_pos, n_labeled, slot)
        all_targets.append(targets)
    n_extra = slot - n_labeled

    fwds = [forward(params, ex.inputs, det_cfg) for ex in batch]

    # teacher pool for instance distillation: region embeddings of every
    # distilled target in the batch, padded once per step from the queue
    def distilled(kind: str) -> bool:
        return train_cfg.distill_classes in ("both", kind)

    region_pool = [
        ex.region_matrix[i]
        for ex in batch
        for i in range(len(ex.kinds))
        if distilled(ex.kinds[i])
    ]
    instance_extras = np.zeros((0, base_matrix.shape[1]))
    if (train_cfg.enable_ckd or train_cfg.enable_rkd) and region_pool:
        negatives, _ = queue_pad(np.stack(region_pool), instance_queue)
        instance_extras = negatives[len(region_pool):]

    g_vis = [[np.zeros((det_cfg.num_queries, det_cfg.embed_dim)) for _ in range(num_layers)] for _ in batch]
    g_qhat = [[np.zeros((det_cfg.num_queries, det_cfg.embed_dim)) for _ in range(num_layers)] for _ in batch]
    g_boxes = [[np.zeros((det_cfg.num_queries, 4)) for _ in range(num_layers)] for _ in batch]

    anchor_boxes = decode_boxes(params["box_seed"]) if train_cfg.anchor_matching else None

    def match_layer(layer: int) -> list[Assignment]:
        out: list[Assignment] = []
        for ex, fw, targets in zip(batch, fwds, all_targets):
            if not targets:
                out.append(Assignment(pairs=()))
                continue
            scores = _sigmoid(distill_cfg.tau_cls * _cosine_rows(fw.qhat[layer], class_matrix))
            if n_extra:
                scores = np.concatenate(
                    [scores, np.zeros((scores.shape[0], n_extra))], axis=1
                )
            boxes_for_cost = anchor_boxes if anchor_boxes is not None else fw.boxes[layer]
            out.append(match(scores, boxes_for_cost, targets, num_base, cost_weights))
        return out

    shared_assignments = match_layer(num_layers - 1) if train_cfg.shared_matching else None

    cls_layers, box_layers, ckd_layers, rkd_layers = [], [], [], []
    for layer in range(num_layers):
        assignments = shared_assignments if shared_assignments is not None else match_layer(layer)

        # classification
        cls_total = 0.0
        for b, (ex, fw, targets, assign) in enumerate(zip(batch, fwds, all_targets, assignments)):
            cls_pairs, _ = split_supervision(assign, targets)
            labeled_pairs = [
                (q, t) for q, t in cls_pairs
                if targets[t].kind == "base" or targets[t].index < n_labeled
            ]
            cols = [
                targets[t].index if targets[t].kind == "base" else num_base + targets[t].index
                for _, t in labeled_pairs
            ]
            y = build_classification_targets(
                [(q, i) for i, (q, _t) in enumerate(labeled_pairs)],
                cols, det_cfg.num_queries, n_columns,
            )
            row_mask = np.ones(det_cfg.num_queries, dtype=bool)
            for q, t in cls_pairs:
                if targets[t].kind == "pseudo" and targets[t].index >= n_labeled:
                    row_mask[q] = False  # unlabeled pseudo box: no class supervision
            loss_i, grad_i = classification_loss(
                fw.qhat[layer], class_matrix, y, colw,
                tau=distill_cfg.tau_cls,
                gamma=distill_cfg.focal_gamma,
                balance=distill_cfg.focal_balance,
                return_grad=True,
                row_mask=row_mask,
            )
            cls_total += loss_i
            g_qhat[b][layer] += grad_i / m
        cls_layers.append(cls_total / m)

        # box regression on base-matched pairs, pooled over the batch
        pred_rows, tgt_rows, owners = [], [], []
        for b, (ex, fw, targets, assign) in enumerate(zip(batch, fwds, all_targets, assignments)):
            _, box_pairs = split_supervision(assign, targets)
            for q, t in box_pairs:
                pred_rows.append(fw.boxes[layer][q])
                tgt_rows.append(ex.boxes[t])
                owners.append((b, q))
        if pred_rows:
            loss_b, grad_b = box_loss(
                np.stack(pred_rows), np.stack(tgt_rows),
                train_cfg.box_l1_weight, train_cfg.box_giou_weight,
                return_grad=True,
            )
            for (b, q), row in zip(owners, grad_b):
                g_boxes[b][layer][q] += row
        else:
            loss_b = 0.0
        box_layers.append(loss_b)

        # instance distillation on matched pairs pooled across the batch
        distill_here = train_cfg.distill_mode == "progressive" or layer == num_layers - 1
        q_rows, t_rows, q_owners = [], [], []
        if distill_here:
            for b, (ex, fw, targets, assign) in enumerate(zip(batch, fwds, all_targets, assignments)):
                for q, t in assign.pairs:
                    if not distilled(targets[t].kind):
                        continue
                    q_rows.append(fw.vis[layer][q])
                    t_rows.append(ex.region_matrix[t])
                    q_owners.append((b, q))
        ckd_v = rkd_v = 0.0
        if q_rows:
            q_mat = np.stack(q_rows)
            t_mat = np.stack(t_rows)
            if train_cfg.enable_ckd:
                ckd_v, grad_c = ckd_instance(
                    q_mat, t_mat, instance_extras, distill_cfg.tau_ckd, return_grad=True
                )
                for (b, q), row in zip(q_owners, grad_c):
                    g_vis[b][layer][q] += distill_cfg.alpha1 * row
            if train_cfg.enable_rkd:
                rkd_v, grad_r = rkd_instance(q_mat, t_mat, distill_cfg.tau_rkd, return_grad=True)
                for (b, q), row in zip(q_owners, grad_r):
                    g_vis[b][layer][q] += distill_cfg.alpha2 * row
        ckd_layers.append(ckd_v)
        rkd_layers.append(rkd_v)

    # image-wise distillation
    ckd_img_v = 0.0
    g_xg = [None] * m
    if train_cfg.enable_image_distill:
        x_rows = np.stack([fw.xg_raw for fw in fwds])
        clip_rows = np.stack([ex.clip_global for ex in batch])
        negatives, _ = queue_pad(clip_rows, image_queue)
        image_extras = negatives[m:]
        ckd_img_v, grad_x = ckd_image(
            x_rows, clip_rows, image_extras, distill_cfg.tau_ckd, return_grad=True
        )
        for b in range(m):
            g_xg[b] = distill_cfg.alpha3 * grad_x[b]

    report = total_loss(cls_layers, box_layers, ckd_layers, rkd_layers, ckd_img_v, distill_cfg)

    grads = zero_grads(params)
    for b, (ex, fw) in enumerate(zip(batch, fwds)):
        backward(
            params, ex.inputs, fw, det_cfg, grads,
            g_vis=g_vis[b], g_qhat=g_qhat[b], g_boxes=g_boxes[b], g_xg=g_xg[b],
        )
    return report, grads
