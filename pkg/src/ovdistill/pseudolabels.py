"""Pseudo text label generation for class-agnostic pseudo boxes.

Per box: caption the region, extract candidate nouns with a small
deterministic chunker, keep the noun whose text embedding is most similar to
the region embedding, then weight each record by the sigmoid of its
dataset-standardized similarity score.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingCache, StubProviders, cosine, normalize_text
from .geometry import Box, Proposal, filter_pseudo_proposals

__all__ = [
    "PseudoLabel",
    "PipelineConfig",
    "PipelineReport",
    "extract_noun_phrases",
    "select_pseudo_label",
    "standardize_weights",
    "run_pipeline",
    "write_pseudo_labels",
    "read_pseudo_labels",
    "write_pseudo_boxes",
    "read_pseudo_boxes",
]


# Closed-class word lists for the deterministic chunker. Anything not listed
# is treated as a noun; noun runs are chunked and their final token kept as
# the head.
_DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those", "its", "his", "her",
    "their", "my", "our", "your", "some", "any", "each", "every", "no",
}
_ADPOSITIONS = {
    "on", "in", "at", "of", "with", "near", "next", "to", "by", "under",
    "over", "behind", "beside", "from", "into", "onto", "against", "about",
    "across", "along", "around", "between", "through", "without", "for",
    "and", "or", "but", "as", "than", "if", "while", "because",
}
_VERBS = {
    "is", "are", "was", "were", "be", "been", "being", "has", "have", "had",
    "sitting", "standing", "running", "parked", "lying", "resting", "looking",
    "walking", "eating", "flying", "floating", "hanging", "leaning", "placed",
    "perched", "sits", "stands", "runs", "lies", "looks", "walks", "eats",
    "holds", "holding", "wearing", "riding", "playing", "moving",
}
_ADJECTIVES = {
    "red", "blue", "green", "yellow", "black", "white", "brown", "gray",
    "orange", "pink", "purple", "small", "large", "big", "little", "tiny",
    "huge", "old", "new", "young", "blurry", "bright", "dark", "shiny",
    "wooden", "metal", "plastic", "fuzzy", "quick", "lazy", "empty", "full",
    "tall", "short", "long", "round", "colorful",
}
_ADVERBS = {"quickly", "slowly", "very", "quite", "really", "too", "so", "also", "not"}
_PRONOUNS = {"it", "he", "she", "they", "we", "you", "i", "them", "him", "us", "me", "there", "here"}

_NON_NOUN = _DETERMINERS | _ADPOSITIONS | _VERBS | _ADJECTIVES | _ADVERBS | _PRONOUNS


def extract_noun_phrases(caption: str) -> list[str]:
    """Extract head nouns of noun phrases from a caption.

    A noun phrase is an optional determiner, any adjectives, then one or more
    noun tokens; the final noun token of each run is kept as the head. Heads
    are lowercased and deduplicated preserving first occurrence.
    """
    tokens = re.findall(r"[a-z]+", caption.lower())
    heads: list[str] = []
    run_last: str | None = None
    for tok in tokens:
        if tok in _NON_NOUN:
            if run_last is not None:
                heads.append(run_last)
                run_last = None
        else:
            run_last = tok
    if run_last is not None:
        heads.append(run_last)
    seen = set()
    out = []
    for h in heads:
        if h not in seen:
            seen.add(h)
            out.append(h)
    return out


def select_pseudo_label(
    candidates: list[str],
    region: np.ndarray,
    text_provider,
) -> tuple[str, float] | None:
    """Pick the candidate noun with maximal cosine to the region embedding.

    Ties break toward the earliest candidate; an empty candidate list yields
    None (the box keeps instance-wise distillation but gets no class label).
    ``text_provider`` is any object with a text_embedding(noun) method.
    """
    best: tuple[str, float] | None = None
    for cand in candidates:
        score = cosine(region, text_provider.text_embedding(cand))
        if best is None or score > best[1]:
            best = (normalize_text(cand), score)
    return best


def standardize_weights(raw_scores: np.ndarray) -> np.ndarray:
    """Sigmoid of the z-scored raw similarity scores over the whole dataset.

    Uses the population standard deviation; with fewer than two records or
    zero variance the spread is taken as 1, so a single record gets weight
    exactly 0.5. Weights are strictly inside (0, 1) and invariant to positive
    affine transforms of the raw scores.
    """
    s = np.asarray(raw_scores, dtype=np.float64)
    if s.size == 0:
        return s.copy()
    mean = float(s.mean())
    std = float(s.std())
    # rounding noise on constant inputs must count as zero variance
    if s.size < 2 or std <= 1e-12 * max(1.0, abs(mean)):
        std = 1.0
    z = (s - mean) / std
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class PseudoLabel:
    """A pseudo box paired with its selected noun and confidence weight."""

    image_id: str
    box: Box
    label: str
    raw_score: float
    weight: float
    text_embedding: np.ndarray | None = None

    def __post_init__(self):
        if not self.label or self.label != normalize_text(self.label):
            raise ValueError(f"label must be non-empty and normalized, got {self.label!r}")
        if not (0.0 < self.weight < 1.0):
            raise ValueError(f"weight must be strictly in (0,1), got {self.weight}")


@dataclass
class PipelineConfig:
    """Knobs for the pseudo-label pipeline."""

    top_k: int = 5
    max_iou: float = 0.5
    label_source: str = "nouns"  # "nouns" or "raw" (whole caption as the label)
    strict_cache: bool = False  # when True, never fall back to providers


@dataclass
class PipelineReport:
    """Counts collected over one pipeline run."""

    n_proposals: int = 0
    n_pseudo_boxes: int = 0
    n_captioned: int = 0
    n_labeled: int = 0
    n_unlabeled: int = 0
    n_skipped_missing_embedding: int = 0
    per_image_boxes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_proposals": self.n_proposals,
            "n_pseudo_boxes": self.n_pseudo_boxes,
            "n_captioned": self.n_captioned,
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "n_skipped_missing_embedding": self.n_skipped_missing_embedding,
            "per_image_boxes": dict(sorted(self.per_image_boxes.items())),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _lookup_region(image_id, box, cache, providers, strict):
    if cache is not None:
        vec = cache.get_region(image_id, box)
        if vec is not None:
            return vec
        if strict:
            return None
    if providers is not None:
        return providers.region_embedding(image_id, box)
    return None


class _CacheTextProvider:
    """Adapter exposing text_embedding over a cache with optional fallback."""

    def __init__(self, cache, providers, strict):
        self.cache = cache
        self.providers = providers
        self.strict = strict

    def text_embedding(self, noun: str) -> np.ndarray:
        if self.cache is not None:
            vec = self.cache.get_text(noun)
            if vec is not None:
                return vec
            if self.strict:
                raise KeyError(f"text embedding for {noun!r} not in cache")
        if self.providers is None:
            raise KeyError(f"no provider for text embedding {noun!r}")
        return self.providers.text_embedding(noun)


def run_pipeline(
    proposals_by_image: dict[str, list[Proposal]],
    gt_boxes_by_image: dict[str, list[Box]],
    providers: StubProviders | None,
    config: PipelineConfig,
    cache: EmbeddingCache | None = None,
) -> tuple[list[PseudoLabel], dict[str, list[Box]], PipelineReport]:
    """Run the full pipeline: filter, caption, extract nouns, select, weight.

    Returns (labeled records, surviving pseudo boxes per image, report).
    Boxes whose region embedding is unavailable are skipped and counted;
    boxes with no extractable noun survive as unlabeled pseudo boxes.
    Deterministic given identical inputs.
    """
    report = PipelineReport()
    pseudo_boxes: dict[str, list[Box]] = {}
    pending: list[tuple[str, Box, str, float]] = []
    text_provider = _CacheTextProvider(cache, providers, config.strict_cache)

    for image_id in sorted(proposals_by_image):
        proposals = proposals_by_image[image_id]
        report.n_proposals += len(proposals)
        gts = gt_boxes_by_image.get(image_id, [])
        boxes = filter_pseudo_proposals(proposals, gts, config.max_iou, config.top_k)
        pseudo_boxes[image_id] = boxes
        report.n_pseudo_boxes += len(boxes)
        report.per_image_boxes[image_id] = len(boxes)

        for box in boxes:
            region = _lookup_region(image_id, box, cache, providers, config.strict_cache)
            if region is None:
                report.n_skipped_missing_embedding += 1
                continue
            if providers is None:
                report.n_skipped_missing_embedding += 1
                continue
            caption = providers.caption(image_id, box)
            report.n_captioned += 1
            if config.label_source == "raw":
                candidates = [normalize_text(caption)] if caption.strip() else []
            else:
                candidates = extract_noun_phrases(caption)
            picked = select_pseudo_label(candidates, region, text_provider)
            if picked is None:
                report.n_unlabeled += 1
                continue
            label, raw_score = picked
            pending.append((image_id, box, label, raw_score))

    weights = standardize_weights(np.array([p[3] for p in pending]))
    records = []
    for (image_id, box, label, raw_score), weight in zip(pending, weights):
        records.append(
            PseudoLabel(
                image_id=image_id,
                box=box,
                label=label,
                raw_score=float(raw_score),
                weight=float(weight),
                text_embedding=text_provider.text_embedding(label),
            )
        )
    report.n_labeled = len(records)
    return records, pseudo_boxes, report


def extract_embedding_cache(
    world,
    providers: StubProviders,
    config: PipelineConfig,
) -> EmbeddingCache:
    """One offline pass over the train split calling every provider once.

    Caches region embeddings for ground-truth and surviving pseudo boxes,
    global embeddings per image, and text embeddings for all class names,
    their aliases, and every candidate noun seen in the pseudo-box captions.
    Training then runs without touching the providers.
    """
    cache = EmbeddingCache(world.config.embed_dim)
    annotations = world.annotations("train")
    proposals_by_image: dict[str, list[Proposal]] = {}
    for pr in world.proposals["train"]:
        proposals_by_image.setdefault(pr.image_id, []).append(pr)

    nouns: set[str] = set()
    for image_id in world.image_ids("train"):
        gts = [box for box, _cls in annotations.get(image_id, [])]
        for box in gts:
            cache.add_region(image_id, box, providers.region_embedding(image_id, box))
        boxes = filter_pseudo_proposals(
            proposals_by_image.get(image_id, []), gts, config.max_iou, config.top_k
        )
        for box in boxes:
            cache.add_region(image_id, box, providers.region_embedding(image_id, box))
            caption = providers.caption(image_id, box)
            if config.label_source == "raw":
                if caption.strip():
                    nouns.add(normalize_text(caption))
            else:
                nouns.update(extract_noun_phrases(caption))
        cache.add_global(image_id, providers.global_embedding(image_id))

    for name in world.config.all_classes:
        nouns.add(normalize_text(name))
        for alias in world.config.aliases.get(name, ()):
            nouns.add(normalize_text(alias))
    for noun in sorted(nouns):
        cache.add_text(noun, providers.text_embedding(noun))
    return cache


def write_pseudo_labels(path, records: list[PseudoLabel]) -> None:
    """Write records as tab-separated lines: image_id, box, label, raw_score, weight."""
    lines = []
    for r in records:
        b = r.box
        lines.append(
            "\t".join(
                [
                    r.image_id,
                    repr(b.x1), repr(b.y1), repr(b.x2), repr(b.y2),
                    r.label,
                    repr(r.raw_score),
                    repr(r.weight),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_pseudo_labels(path) -> list[PseudoLabel]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image_id, x1, y1, x2, y2, label, raw_score, weight = line.split("\t")
        records.append(
            PseudoLabel(
                image_id=image_id,
                box=Box(float(x1), float(y1), float(x2), float(y2)),
                label=label,
                raw_score=float(raw_score),
                weight=float(weight),
            )
        )
    return records


def write_pseudo_boxes(path, boxes_by_image: dict[str, list[Box]]) -> None:
    """Write surviving pseudo boxes (labeled or not) for instance distillation."""
    lines = []
    for image_id in sorted(boxes_by_image):
        for b in boxes_by_image[image_id]:
            lines.append("\t".join([image_id, repr(b.x1), repr(b.y1), repr(b.x2), repr(b.y2)]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_pseudo_boxes(path) -> dict[str, list[Box]]:
    out: dict[str, list[Box]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image_id, x1, y1, x2, y2 = line.split("\t")
        out.setdefault(image_id, []).append(Box(float(x1), float(y1), float(x2), float(y2)))
    return out
