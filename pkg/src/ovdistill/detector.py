"""A tiny trainable query-based detector over synthetic feature pyramids.

Each of N learned queries carries a state vector and a box in normalized
image coordinates. Per decoder layer, a query pools a small grid of features
around its current box, updates its state through a tanh mixing layer, and
refines its box. Three heads hang off the per-layer states: a linear visual
projection (instance distillation space), a two-layer MLP into text space
(classification), and, per image, a linear projection of the pooled backbone
feature (image distillation space).

Forward and backward passes are written out by hand in numpy; the backward
pass consumes d(loss)/d(head outputs) and accumulates parameter gradients.
Box coordinates feeding the pooling grid are treated as constants (no
gradient through pooling), the usual stop-gradient for sampling locations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import global_feature

__all__ = [
    "DetectorConfig",
    "ImageInputs",
    "ForwardPass",
    "init_params",
    "prepare_image",
    "forward",
    "backward",
    "zero_grads",
    "decode_boxes",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class DetectorConfig:
    num_queries: int = 300
    num_layers: int = 2
    state_dim: int = 64
    embed_dim: int = 64
    hidden_dim: int = 64
    pool_grid: int = 3
    pool_expand: float = 1.5
    pool_levels: int = 1
    shared_projection: bool = False
    init_box_size: float = 0.3

    def __post_init__(self):
        if self.num_queries < 1 or self.num_layers < 1:
            raise ValueError("need at least one query and one layer")


@dataclass
class ImageInputs:
    """Preprocessed per-image features: per-level integral images plus the
    pooled whole-image channel vector."""

    levels: list
    integrals: list
    shapes: list
    gfeat: np.ndarray

    @property
    def level0(self) -> np.ndarray:
        return self.levels[0]


@dataclass
class ForwardPass:
    """All intermediates needed to run the manual backward pass."""

    pooled: list = field(default_factory=list)  # per layer (N, g*g*C)
    s_prev: list = field(default_factory=list)  # per layer (N, ds)
    states: list = field(default_factory=list)  # per layer (N, ds)
    betas: list = field(default_factory=list)  # per layer (N, 4) cx cy logw logh
    boxes: list = field(default_factory=list)  # per layer (N, 4) corners
    vis: list = field(default_factory=list)  # per layer (N, d)
    hidden: list = field(default_factory=list)  # per layer (N, dh) post-relu
    qhat: list = field(default_factory=list)  # per layer (N, d)
    xg_raw: np.ndarray | None = None  # (d,)


def orthonormal_span(rows: np.ndarray) -> np.ndarray:
    """Orthonormal basis (as rows) of the row space of ``rows``."""
    q, r = np.linalg.qr(np.asarray(rows, dtype=np.float64).T)
    keep = np.abs(np.diag(r)) > 1e-10
    return q.T[keep]


def init_params(
    cfg: DetectorConfig,
    channels: int,
    seed: int,
    span: np.ndarray | None = None,
    num_levels: int = 2,
) -> dict[str, np.ndarray]:
    """Initialize parameters; ``span`` (k x d orthonormal rows), when given,
    freezes the subspace the embedding heads can express.

    Constraining the heads to the span of the classifier text directions seen
    in training keeps scores against unseen directions at chance instead of
    arbitrary saturated values, the behaviour a fully trained open-vocabulary
    head exhibits.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    n, ds = cfg.num_queries, cfg.state_dim
    d, dh = cfg.embed_dim, cfg.hidden_dim
    head_dim = d if span is None else span.shape[0]
    pooled_dim = pooled_feature_dim(cfg, channels, num_levels)

    def linear(shape):
        fan_in = shape[-1]
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    params: dict[str, np.ndarray] = {}
    if span is not None:
        params["span_basis"] = np.asarray(span, dtype=np.float64)
    params["z_seed"] = 0.5 * rng.standard_normal((n, ds))

    # queries start on a grid of mid-sized boxes covering the image
    nx = int(np.ceil(np.sqrt(n)))
    ny = int(np.ceil(n / nx))
    centers = [
        (((i % nx) + 0.5) / nx, ((i // nx) + 0.5) / ny) for i in range(n)
    ]
    box_seed = np.zeros((n, 4))
    box_seed[:, 0] = [c[0] for c in centers]
    box_seed[:, 1] = [c[1] for c in centers]
    box_seed[:, 2] = np.log(cfg.init_box_size)
    box_seed[:, 3] = np.log(cfg.init_box_size)
    params["box_seed"] = box_seed

    for layer in range(cfg.num_layers):
        params[f"W_r{layer}"] = linear((ds, pooled_dim))
        params[f"W_s{layer}"] = linear((ds, ds))
        params[f"b_mix{layer}"] = np.zeros(ds)
        params[f"W_box{layer}"] = 0.01 * linear((4, ds))
        params[f"b_box{layer}"] = np.zeros(4)
    params["W_vis"] = linear((head_dim, ds))
    params["W1"] = linear((dh, ds))
    params["b1"] = np.zeros(dh)
    params["W2"] = linear((head_dim, dh))
    params["b2"] = np.zeros(head_dim)
    params["W_glob"] = linear((d, channels))
    params["b_glob"] = np.zeros(d)
    return params


FROZEN_PARAMS = ("span_basis",)


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def prepare_image(pyramid: list[np.ndarray]) -> ImageInputs:
    levels = [np.asarray(lv, dtype=np.float64) for lv in pyramid]
    integrals = []
    shapes = []
    for lv in levels:
        c, h, w = lv.shape
        integral = np.zeros((c, h + 1, w + 1))
        integral[:, 1:, 1:] = lv.cumsum(axis=1).cumsum(axis=2)
        integrals.append(integral)
        shapes.append((h, w))
    return ImageInputs(
        levels=levels,
        integrals=integrals,
        shapes=shapes,
        gfeat=global_feature(pyramid),
    )


def decode_boxes(beta: np.ndarray) -> np.ndarray:
    """(cx, cy, logw, logh) to corner boxes in normalized coordinates."""
    cx, cy = beta[:, 0], beta[:, 1]
    w = np.exp(beta[:, 2])
    h = np.exp(beta[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def _grid_pool_level(
    integral: np.ndarray, h: int, w: int, boxes: np.ndarray, grid: int, expand: float
) -> np.ndarray:
    """Average-pool a grid x grid patch of subcell means around each box."""
    c = integral.shape[0]
    n = boxes.shape[0]
    out = np.zeros((n, grid * grid * c))

    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    bw = np.clip((boxes[:, 2] - boxes[:, 0]) * expand, 1e-6, None)
    bh = np.clip((boxes[:, 3] - boxes[:, 1]) * expand, 1e-6, None)
    x_lo = np.clip(cx - bw / 2, 0.0, 1.0)
    x_hi = np.clip(cx + bw / 2, 0.0, 1.0)
    y_lo = np.clip(cy - bh / 2, 0.0, 1.0)
    y_hi = np.clip(cy + bh / 2, 0.0, 1.0)

    for i in range(n):
        xs = np.linspace(x_lo[i], x_hi[i], grid + 1)
        ys = np.linspace(y_lo[i], y_hi[i], grid + 1)
        for gy in range(grid):
            r0 = int(np.ceil(ys[gy] * h - 0.5))
            r1 = int(np.ceil(ys[gy + 1] * h - 0.5))
            r0, r1 = max(r0, 0), min(r1, h)
            for gx in range(grid):
                c0 = int(np.ceil(xs[gx] * w - 0.5))
                c1 = int(np.ceil(xs[gx + 1] * w - 0.5))
                c0, c1 = max(c0, 0), min(c1, w)
                count = (r1 - r0) * (c1 - c0)
                if count <= 0:
                    continue
                total = (
                    integral[:, r1, c1] - integral[:, r0, c1]
                    - integral[:, r1, c0] + integral[:, r0, c0]
                )
                out[i, (gy * grid + gx) * c : (gy * grid + gx + 1) * c] = total / count
    return out


def _grid_pool(
    inputs: ImageInputs, boxes: np.ndarray, grid: int, expand: float, levels: int = 1
) -> np.ndarray:
    """Pooled features from the first ``levels`` pyramid levels plus the box
    geometry itself.

    Box coordinates enter as plain (detached) features so a query knows where
    it sits and how large it is.
    """
    take = min(levels, len(inputs.integrals))
    parts = [
        _grid_pool_level(inputs.integrals[k], *inputs.shapes[k], boxes, grid, expand)
        for k in range(take)
    ]
    parts.append(boxes.copy())
    return np.concatenate(parts, axis=1)


def pooled_feature_dim(cfg: DetectorConfig, channels: int, num_levels: int) -> int:
    return cfg.pool_grid * cfg.pool_grid * channels * min(cfg.pool_levels, num_levels) + 4


def forward(params: dict, inputs: ImageInputs, cfg: DetectorConfig) -> ForwardPass:
    fw = ForwardPass()
    s = params["z_seed"]
    beta = params["box_seed"]
    for layer in range(cfg.num_layers):
        boxes_in = decode_boxes(beta)
        pooled = _grid_pool(inputs, boxes_in, cfg.pool_grid, cfg.pool_expand, cfg.pool_levels)
        pre = pooled @ params[f"W_r{layer}"].T + s @ params[f"W_s{layer}"].T + params[f"b_mix{layer}"]
        s_new = np.tanh(pre)
        delta = s_new @ params[f"W_box{layer}"].T + params[f"b_box{layer}"]
        beta_new = beta + delta

        span = params.get("span_basis")
        v = s_new @ params["W_vis"].T
        if span is not None:
            v = v @ span
        if cfg.shared_projection:
            hidden = np.zeros((s_new.shape[0], cfg.hidden_dim))
            qhat = v
        else:
            hidden = np.maximum(s_new @ params["W1"].T + params["b1"], 0.0)
            qhat = hidden @ params["W2"].T + params["b2"]
            if span is not None:
                qhat = qhat @ span

        fw.pooled.append(pooled)
        fw.s_prev.append(s)
        fw.states.append(s_new)
        fw.betas.append(beta_new)
        fw.boxes.append(decode_boxes(beta_new))
        fw.vis.append(v)
        fw.hidden.append(hidden)
        fw.qhat.append(qhat)
        s = s_new
        beta = beta_new
    fw.xg_raw = params["W_glob"] @ inputs.gfeat + params["b_glob"]
    return fw


def backward(
    params: dict,
    inputs: ImageInputs,
    fw: ForwardPass,
    cfg: DetectorConfig,
    grads: dict,
    g_vis: list | None = None,
    g_qhat: list | None = None,
    g_boxes: list | None = None,
    g_xg: np.ndarray | None = None,
) -> None:
    """Accumulate parameter gradients for one image into ``grads``.

    ``g_vis``, ``g_qhat`` and ``g_boxes`` are per-layer lists of gradients
    w.r.t. the corresponding forward outputs (entries may be None); ``g_xg``
    is the gradient w.r.t. the raw projected global feature.
    """
    n = cfg.num_queries
    gs_carry = np.zeros((n, cfg.state_dim))
    gbeta_carry = np.zeros((n, 4))

    for layer in reversed(range(cfg.num_layers)):
        s_l = fw.states[layer]
        gs = gs_carry
        gs_carry = np.zeros((n, cfg.state_dim))

        span = params.get("span_basis")
        gv = None if g_vis is None else g_vis[layer]
        gq = None if g_qhat is None else g_qhat[layer]
        if cfg.shared_projection and gq is not None:
            gv = gq if gv is None else gv + gq
            gq = None
        if gv is not None:
            if span is not None:
                gv = gv @ span.T
            grads["W_vis"] += gv.T @ s_l
            gs = gs + gv @ params["W_vis"]
        if gq is not None:
            if span is not None:
                gq = gq @ span.T
            hidden = fw.hidden[layer]
            grads["W2"] += gq.T @ hidden
            grads["b2"] += gq.sum(axis=0)
            gh = gq @ params["W2"]
            gh_pre = gh * (hidden > 0.0)
            grads["W1"] += gh_pre.T @ s_l
            grads["b1"] += gh_pre.sum(axis=0)
            gs = gs + gh_pre @ params["W1"]

        gb = None if g_boxes is None else g_boxes[layer]
        if gb is not None:
            beta = fw.betas[layer]
            w = np.exp(beta[:, 2])
            h = np.exp(beta[:, 3])
            gbeta_carry[:, 0] += gb[:, 0] + gb[:, 2]
            gbeta_carry[:, 1] += gb[:, 1] + gb[:, 3]
            gbeta_carry[:, 2] += (gb[:, 2] - gb[:, 0]) * (w / 2)
            gbeta_carry[:, 3] += (gb[:, 3] - gb[:, 1]) * (h / 2)

        gdelta = gbeta_carry
        grads[f"W_box{layer}"] += gdelta.T @ s_l
        grads[f"b_box{layer}"] += gdelta.sum(axis=0)
        gs = gs + gdelta @ params[f"W_box{layer}"]

        gpre = gs * (1.0 - s_l * s_l)
        grads[f"W_r{layer}"] += gpre.T @ fw.pooled[layer]
        grads[f"W_s{layer}"] += gpre.T @ fw.s_prev[layer]
        grads[f"b_mix{layer}"] += gpre.sum(axis=0)
        gs_carry = gpre @ params[f"W_s{layer}"]
        # gbeta_carry passes through the additive box update unchanged

    grads["z_seed"] += gs_carry
    grads["box_seed"] += gbeta_carry

    if g_xg is not None:
        grads["W_glob"] += np.outer(g_xg, inputs.gfeat)
        grads["b_glob"] += g_xg


def save_checkpoint(path, params: dict, cfg: DetectorConfig, meta: dict | None = None) -> None:
    payload = dict(params)
    header = {"config": asdict(cfg), "meta": meta or {}}
    payload["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], DetectorConfig, dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"].tobytes()).decode())
        params = {k: data[k].copy() for k in data.files if k != "__header__"}
    cfg = DetectorConfig(**header["config"])
    return params, cfg, header["meta"]
