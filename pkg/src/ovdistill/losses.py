"""Distillation and detection losses with hand-derived analytic gradients.

Four losses make up the training signal:

* instance-wise contrastive distillation: per matched query, pull toward its
  paired teacher region embedding and push from every other column (in-batch
  off-diagonal plus queued negatives) through sigmoid-scaled cosine logits;
* instance-wise relational distillation: KL between the row softmax of the
  query cosine-similarity matrix and the teacher's, teacher rows constant;
* classification: sigmoid focal loss over cosine logits against the text
  classifier columns, with per-column confidence weights on positive terms
  of pseudo columns;
* image-wise contrastive distillation: bidirectional InfoNCE between global
  detector features and teacher global embeddings, queue padding on the
  image-to-teacher direction.

All losses take raw (not necessarily unit-norm) student rows, normalize
inside the cosine, and return d(loss)/d(student rows) on request; teacher
inputs never receive gradients. Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import giou_pairs

__all__ = [
    "DistillConfig",
    "LossReport",
    "ckd_instance",
    "rkd_instance",
    "classification_loss",
    "build_classification_targets",
    "column_weight_vector",
    "bilinear_resize",
    "global_feature",
    "ckd_image",
    "box_loss",
    "total_loss",
]


@dataclass
class DistillConfig:
    """Temperatures, loss coefficients and focal parameters."""

    tau_ckd: float = 20.0
    tau_rkd: float = 5.0
    tau_cls: float = 50.0
    alpha1: float = 0.5
    alpha2: float = 5.0
    alpha3: float = 0.2
    focal_gamma: float = 2.0
    focal_balance: float = 0.25
    num_layers: int = 2
    instance_queue_capacity: int = 2048
    image_queue_capacity: int = 512

    def __post_init__(self):
        for name in ("tau_ckd", "tau_rkd", "tau_cls"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha1", "alpha2", "alpha3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero rows cannot be normalized")
    return x / norms[:, None], norms


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _chain_cosine_rows(
    g_cos: np.ndarray, cos: np.ndarray, x_unit: np.ndarray, x_norm: np.ndarray, t_unit: np.ndarray
) -> np.ndarray:
    """Backprop d(loss)/d(cos matrix) to the raw row vectors of the first argument.

    For c = cos(x_i, t_j), dc/dx_i = (t_hat_j - c * x_hat_i) / ||x_i||.
    """
    lead = g_cos @ t_unit
    diag = (g_cos * cos).sum(axis=1)
    return (lead - diag[:, None] * x_unit) / x_norm[:, None]


def _stack_teacher(region_embs: np.ndarray, extra_negatives: np.ndarray | None) -> np.ndarray:
    region_embs = np.asarray(region_embs, dtype=np.float64)
    if extra_negatives is None or len(extra_negatives) == 0:
        return region_embs
    extra = np.asarray(extra_negatives, dtype=np.float64)
    if extra.shape[1] != region_embs.shape[1]:
        raise ValueError("negative embeddings dimension mismatch")
    return np.concatenate([region_embs, extra], axis=0)


def ckd_instance(
    queries: np.ndarray,
    region_embs: np.ndarray,
    extra_negatives: np.ndarray | None = None,
    tau: float = 20.0,
    return_grad: bool = False,
):
    """Contrastive distillation between queries and their region embeddings.

    L = -(1/n) sum_i [ log s(tau c_ii) + sum_{j != i} log(1 - s(tau c_ij)) ]
    where c_ij is the cosine between query i and teacher column j, columns
    run over the n paired embeddings followed by the extra negatives, and s
    is the sigmoid. Empty input gives 0.
    """
    queries = np.asarray(queries, dtype=np.float64)
    n = queries.shape[0]
    if n == 0:
        return (0.0, np.zeros_like(queries)) if return_grad else 0.0
    region_embs = np.asarray(region_embs, dtype=np.float64)
    if region_embs.shape != queries.shape:
        raise ValueError(f"shape mismatch: {queries.shape} vs {region_embs.shape}")

    teacher = _stack_teacher(region_embs, extra_negatives)
    q_unit, q_norm = _unit_rows(queries)
    t_unit, _ = _unit_rows(teacher)
    cos = q_unit @ t_unit.T
    u = tau * cos

    diag = np.arange(n)
    pos_terms = _softplus(-u[diag, diag])
    neg_terms = _softplus(u)
    neg_mask = np.ones_like(u, dtype=bool)
    neg_mask[diag, diag] = False
    loss = (pos_terms.sum() + neg_terms[neg_mask].sum()) / n
    if not return_grad:
        return float(loss)

    s = 1.0 / (1.0 + np.exp(-u))
    g_cos = (tau / n) * s
    g_cos[diag, diag] = -(tau / n) * (1.0 - s[diag, diag])
    grad = _chain_cosine_rows(g_cos, cos, q_unit, q_norm, t_unit)
    return float(loss), grad


def rkd_instance(
    queries: np.ndarray,
    region_embs: np.ndarray,
    tau: float = 5.0,
    return_grad: bool = False,
):
    """Relational distillation: match row softmaxes of the cosine matrices.

    Builds R_q and R_e from pairwise cosines of queries and teacher region
    embeddings, then averages KL(softmax(tau R_q[i,:]) || softmax(tau R_e[i,:]))
    over rows. Teacher rows are constant. Non-negative, zero iff the row
    softmaxes agree; fewer than two rows gives 0.
    """
    queries = np.asarray(queries, dtype=np.float64)
    n = queries.shape[0]
    if n < 2:
        return (0.0, np.zeros_like(queries)) if return_grad else 0.0
    region_embs = np.asarray(region_embs, dtype=np.float64)
    if region_embs.shape != queries.shape:
        raise ValueError(f"shape mismatch: {queries.shape} vs {region_embs.shape}")

    q_unit, q_norm = _unit_rows(queries)
    e_unit, _ = _unit_rows(region_embs)
    rel_q = q_unit @ q_unit.T
    rel_e = e_unit @ e_unit.T

    log_p = _log_softmax(tau * rel_q, axis=1)
    log_t = _log_softmax(tau * rel_e, axis=1)
    p = np.exp(log_p)
    row_kl = (p * (log_p - log_t)).sum(axis=1)
    loss = float(row_kl.mean())
    if not return_grad:
        return loss

    g_logits = (p * ((log_p - log_t) - row_kl[:, None])) / n
    g_rel = tau * g_logits
    sym = g_rel + g_rel.T
    np.fill_diagonal(sym, 0.0)  # cos(q_i, q_i) is constant 1
    lead = sym @ q_unit
    diag = (sym * rel_q).sum(axis=1)
    grad = (lead - diag[:, None] * q_unit) / q_norm[:, None]
    return loss, grad


def build_classification_targets(
    pairs: list[tuple[int, int]],
    target_columns: list[int],
    num_queries: int,
    num_columns: int,
) -> np.ndarray:
    """One-hot matrix from assignment pairs; unmatched queries are all-zero rows."""
    y = np.zeros((num_queries, num_columns), dtype=np.float64)
    for q, t in pairs:
        y[q, target_columns[t]] = 1.0
    return y


def column_weight_vector(num_base: int, pseudo_weights: np.ndarray | list) -> np.ndarray:
    """Per-column weights: exactly 1 for base columns, the confidence weight
    for pseudo columns."""
    return np.concatenate([np.ones(num_base), np.asarray(pseudo_weights, dtype=np.float64)])


def classification_loss(
    q_hat: np.ndarray,
    class_embs: np.ndarray,
    targets_onehot: np.ndarray,
    column_weights: np.ndarray | None = None,
    tau: float = 50.0,
    gamma: float = 2.0,
    balance: float = 0.25,
    return_grad: bool = False,
    row_mask: np.ndarray | None = None,
):
    """Sigmoid focal classification over cosine logits with column weights.

    p_ij = sigmoid(tau cos(q_hat_i, e_j)). Positive cells contribute
    -balance (1-p)^gamma log p scaled by the column weight; negative cells
    contribute -(1-balance) p^gamma log(1-p) at weight 1. Averaged over the
    number of queries. With all weights 1 this is plain sigmoid focal loss.

    ``row_mask`` drops whole query rows from the loss (used for queries
    matched to pseudo boxes that carry no text label, which must be neither
    positives nor background).
    """
    q_hat = np.asarray(q_hat, dtype=np.float64)
    class_embs = np.asarray(class_embs, dtype=np.float64)
    y = np.asarray(targets_onehot, dtype=np.float64)
    n, c = y.shape
    if q_hat.shape[0] != n or class_embs.shape[0] != c:
        raise ValueError("target matrix inconsistent with queries/columns")
    if q_hat.shape[1] != class_embs.shape[1]:
        raise ValueError("embedding dimension mismatch")
    if column_weights is None:
        column_weights = np.ones(c)
    colw = np.asarray(column_weights, dtype=np.float64)
    rows = np.ones(n) if row_mask is None else np.asarray(row_mask, dtype=np.float64)

    q_unit, q_norm = _unit_rows(q_hat)
    e_unit, _ = _unit_rows(class_embs)
    cos = q_unit @ e_unit.T
    u = tau * cos

    log_p = -_softplus(-u)
    log_1p = -_softplus(u)
    p = np.exp(log_p)
    one_minus_p = np.exp(log_1p)

    pos = -balance * np.exp(gamma * log_1p) * log_p
    neg = -(1.0 - balance) * np.exp(gamma * log_p) * log_1p
    cells = y * colw[None, :] * pos + (1.0 - y) * neg
    loss = float((rows[:, None] * cells).sum() / n)
    if not return_grad:
        return loss

    d_pos = balance * np.exp(gamma * log_1p) * (gamma * p * log_p - one_minus_p)
    d_neg = (1.0 - balance) * np.exp(gamma * log_p) * (p - gamma * one_minus_p * log_1p)
    g_u = rows[:, None] * (y * colw[None, :] * d_pos + (1.0 - y) * d_neg) / n
    g_cos = tau * g_u
    grad = _chain_cosine_rows(g_cos, cos, q_unit, q_norm, e_unit)
    return loss, grad


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (C, H, W) tensor with bilinear interpolation.

    Output grid corners map onto input grid corners (align-corners
    convention); a single output row or column samples the input center.
    Constant inputs stay exactly constant.
    """
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape

    def positions(n_out: int, n_in: int) -> np.ndarray:
        if n_out == 1:
            return np.full(1, (n_in - 1) / 2.0)
        return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)

    ys = positions(out_h, h)
    xs = positions(out_w, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]

    top = x[:, y0[:, None], x0[None, :]] * (1 - wx) + x[:, y0[:, None], x1[None, :]] * wx
    bot = x[:, y1[:, None], x0[None, :]] * (1 - wx) + x[:, y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def global_feature(pyramid: list[np.ndarray]) -> np.ndarray:
    """Whole-image feature: resize all pyramid levels to the finest level's
    spatial size, average across levels, then average-pool spatially.

    Returns the pre-projection channel vector; downstream a learned map takes
    it to the shared embedding dimension.
    """
    if len(pyramid) == 0:
        raise ValueError("pyramid must have at least one level")
    levels = [np.asarray(lv, dtype=np.float64) for lv in pyramid]
    c0, h0, w0 = levels[0].shape
    for lv in levels:
        if lv.shape[0] != c0:
            raise ValueError("pyramid levels must share the channel count")
    resized = [lv if lv.shape[1:] == (h0, w0) else bilinear_resize(lv, h0, w0) for lv in levels]
    merged = np.mean(resized, axis=0)
    return merged.mean(axis=(1, 2))


def ckd_image(
    global_feats: np.ndarray,
    clip_globals: np.ndarray,
    extra_negatives: np.ndarray | None = None,
    tau: float = 20.0,
    return_grad: bool = False,
):
    """Bidirectional contrastive distillation between global features.

    Mean over images of the two InfoNCE directions at temperature tau: the
    image-to-teacher direction softmaxes over the m paired teacher columns
    plus any queued negatives, the teacher-to-image direction over the m
    student rows. A single unpadded pair gives exactly 0. Gradient flows to
    the student features only.
    """
    x = np.asarray(global_feats, dtype=np.float64)
    m = x.shape[0]
    if m == 0:
        return (0.0, np.zeros_like(x)) if return_grad else 0.0
    e = np.asarray(clip_globals, dtype=np.float64)
    if e.shape != x.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {e.shape}")

    teacher = _stack_teacher(e, extra_negatives)
    x_unit, x_norm = _unit_rows(x)
    t_unit, _ = _unit_rows(teacher)
    cos = x_unit @ t_unit.T
    u = tau * cos

    diag = np.arange(m)
    log_p1 = _log_softmax(u, axis=1)
    log_p2 = _log_softmax(u[:, :m], axis=0)
    loss = float(-(log_p1[diag, diag].sum() + log_p2[diag, diag].sum()) / (2 * m))
    if not return_grad:
        return loss

    p1 = np.exp(log_p1)
    p2 = np.exp(log_p2)
    g_u = p1.copy()
    g_u[diag, diag] -= 1.0
    g_u[:, :m] += p2
    g_u[diag, diag] -= 1.0
    g_u /= 2 * m
    g_cos = tau * g_u
    grad = _chain_cosine_rows(g_cos, cos, x_unit, x_norm, t_unit)
    return float(loss), grad


def box_loss(
    pred: np.ndarray,
    target: np.ndarray,
    l1_weight: float = 5.0,
    giou_weight: float = 2.0,
    return_grad: bool = False,
):
    """L1 plus (1 - GIoU) over paired boxes, averaged over pairs."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    n = pred.shape[0]
    if n == 0:
        return (0.0, np.zeros((0, 4))) if return_grad else 0.0
    diff = pred - target
    if not return_grad:
        g = giou_pairs(pred, target)
        loss = (l1_weight * np.abs(diff).sum() + giou_weight * (1.0 - g).sum()) / n
        return float(loss)
    g, dg = giou_pairs(pred, target, return_grad=True)
    loss = (l1_weight * np.abs(diff).sum() + giou_weight * (1.0 - g).sum()) / n
    grad = (l1_weight * np.sign(diff) - giou_weight * dg) / n
    return float(loss), grad


@dataclass(frozen=True)
class LossReport:
    """Per-layer loss components and the weighted total for one step."""

    cls: tuple[float, ...]
    box: tuple[float, ...]
    ckd_ins: tuple[float, ...]
    rkd_ins: tuple[float, ...]
    ckd_img: float
    total: float

    def arithmetic_total(self, config: DistillConfig) -> float:
        """Recompute the total from components; must equal ``total`` exactly."""
        return _weighted_total(self.cls, self.box, self.ckd_ins, self.rkd_ins, self.ckd_img, config)

    def to_dict(self) -> dict:
        return {
            "cls": list(self.cls),
            "box": list(self.box),
            "ckd_ins": list(self.ckd_ins),
            "rkd_ins": list(self.rkd_ins),
            "ckd_img": self.ckd_img,
            "total": self.total,
        }


def _weighted_total(cls, box, ckd_ins, rkd_ins, ckd_img, config: DistillConfig) -> float:
    total = 0.0
    for c, b, ck, rk in zip(cls, box, ckd_ins, rkd_ins):
        total += c + b + config.alpha1 * ck + config.alpha2 * rk
    total += config.alpha3 * ckd_img
    return total


def total_loss(
    cls: list[float],
    box: list[float],
    ckd_ins: list[float],
    rkd_ins: list[float],
    ckd_img: float,
    config: DistillConfig,
) -> LossReport:
    """Assemble the per-layer components into the weighted training total."""
    lengths = {len(cls), len(box), len(ckd_ins), len(rkd_ins)}
    if lengths != {config.num_layers}:
        raise ValueError(f"expected {config.num_layers} per-layer components, got {lengths}")
    total = _weighted_total(cls, box, ckd_ins, rkd_ins, ckd_img, config)
    return LossReport(
        cls=tuple(float(v) for v in cls),
        box=tuple(float(v) for v in box),
        ckd_ins=tuple(float(v) for v in ckd_ins),
        rkd_ins=tuple(float(v) for v in rkd_ins),
        ckd_img=float(ckd_img),
        total=float(total),
    )
