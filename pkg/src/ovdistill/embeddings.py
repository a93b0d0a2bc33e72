"""Embedding vector math, the on-disk embedding cache, FIFO memory queues,
and deterministic stub providers standing in for the frozen teacher encoders.

All stored vectors are unit-norm float64, so cosine similarity reduces to a
dot product. The cache is a small binary container designed for bit-exact
round trips; a real extractor can produce the same format offline.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from pathlib import Path

import numpy as np

from .geometry import Box, iou

__all__ = [
    "normalize",
    "cosine",
    "MemoryQueue",
    "queue_pad",
    "EmbeddingCache",
    "CacheFormatError",
    "CacheDimensionError",
    "StubProviders",
    "ALIAS_COSINE",
    "normalize_text",
    "stable_seed",
]

ALIAS_COSINE = 0.95

_MAGIC = b"HOVD"
_VERSION = 1


def normalize(v: np.ndarray) -> np.ndarray:
    """Return v scaled to unit Euclidean norm. Rejects zero and non-finite input."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite components")
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


class MemoryQueue:
    """FIFO buffer of detached teacher embeddings used as contrastive negatives."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._entries: deque[np.ndarray] = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def snapshot(self) -> np.ndarray:
        """Current contents in queue order (oldest first) as a (k, dim) array."""
        if not self._entries:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack(list(self._entries))

    def push(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.dim)
        for row in rows:
            self._entries.append(row.copy())


def queue_pad(batch: np.ndarray, queue: MemoryQueue) -> tuple[np.ndarray, MemoryQueue]:
    """Pad a batch of teacher embeddings with queued negatives, then enqueue it.

    Returns (negatives, queue) where negatives is the batch followed by the
    queue contents captured before the push, so the first len(batch) rows of
    the result always equal the batch. The queue is updated in place with
    FIFO eviction.
    """
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, queue.dim)
    held = queue.snapshot()
    negatives = np.concatenate([batch, held], axis=0)
    queue.push(batch)
    return negatives, queue


class CacheFormatError(ValueError):
    """Raised for a malformed cache file (bad magic, version or truncation)."""


class CacheDimensionError(ValueError):
    """Raised when a cache file's dimension disagrees with the expected one."""


def _region_key(image_id: str, box: Box) -> tuple:
    return (image_id, (box.x1, box.y1, box.x2, box.y2))


class EmbeddingCache:
    """Exact-match store of unit-norm embeddings keyed by region, image or text.

    Region entries are keyed by (image_id, box coordinates), global entries by
    image_id, text entries by the normalized string. Lookups never fabricate
    vectors: a miss returns None.
    """

    def __init__(self, dim: int):
        if dim < 2:
            raise ValueError("dimension must be >= 2")
        self.dim = int(dim)
        self._region: dict[tuple, np.ndarray] = {}
        self._global: dict[str, np.ndarray] = {}
        self._text: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._region) + len(self._global) + len(self._text)

    def _prepare(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise CacheDimensionError(f"expected dimension {self.dim}, got {vec.shape}")
        return normalize(vec)

    def _insert(self, table: dict, key, vec: np.ndarray) -> None:
        vec = self._prepare(vec)
        if key in table:
            if not np.array_equal(table[key], vec):
                raise ValueError(f"conflicting value for existing key {key!r}")
            return
        table[key] = vec

    def add_region(self, image_id: str, box: Box, vec: np.ndarray) -> None:
        self._insert(self._region, _region_key(image_id, box), vec)

    def add_global(self, image_id: str, vec: np.ndarray) -> None:
        self._insert(self._global, image_id, vec)

    def add_text(self, text: str, vec: np.ndarray) -> None:
        self._insert(self._text, normalize_text(text), vec)

    def get_region(self, image_id: str, box: Box) -> np.ndarray | None:
        return self._region.get(_region_key(image_id, box))

    def get_global(self, image_id: str) -> np.ndarray | None:
        return self._global.get(image_id)

    def get_text(self, text: str) -> np.ndarray | None:
        return self._text.get(normalize_text(text))

    def save(self, path) -> None:
        """Serialize to the binary container (magic HOVD, version, dim, sections)."""
        out = bytearray()
        out += _MAGIC
        out += struct.pack("<II", _VERSION, self.dim)

        def put_str(s: str):
            raw = s.encode("utf-8")
            out.extend(struct.pack("<I", len(raw)))
            out.extend(raw)

        def put_vec(v: np.ndarray):
            out.extend(v.astype("<f8").tobytes())

        out += struct.pack("<I", len(self._region))
        for (image_id, coords), vec in self._region.items():
            put_str(image_id)
            out.extend(struct.pack("<4d", *coords))
            put_vec(vec)
        out += struct.pack("<I", len(self._global))
        for image_id, vec in self._global.items():
            put_str(image_id)
            put_vec(vec)
        out += struct.pack("<I", len(self._text))
        for text, vec in self._text.items():
            put_str(text)
            put_vec(vec)
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path, expected_dim: int | None = None) -> "EmbeddingCache":
        data = Path(path).read_bytes()
        view = memoryview(data)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise CacheFormatError(f"truncated cache file {path}")
            chunk = view[pos : pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != _MAGIC:
            raise CacheFormatError(f"bad magic in {path}")
        version, dim = struct.unpack("<II", take(8))
        if version != _VERSION:
            raise CacheFormatError(f"unsupported cache version {version}")
        if expected_dim is not None and dim != expected_dim:
            raise CacheDimensionError(f"cache dimension {dim} != expected {expected_dim}")
        cache = cls(dim)

        def get_str() -> str:
            (n,) = struct.unpack("<I", take(4))
            return bytes(take(n)).decode("utf-8")

        def get_vec() -> np.ndarray:
            return np.frombuffer(take(8 * dim), dtype="<f8").astype(np.float64)

        (n_region,) = struct.unpack("<I", take(4))
        for _ in range(n_region):
            image_id = get_str()
            coords = struct.unpack("<4d", take(32))
            cache._region[(image_id, coords)] = get_vec()
        (n_global,) = struct.unpack("<I", take(4))
        for _ in range(n_global):
            image_id = get_str()
            cache._global[image_id] = get_vec()
        (n_text,) = struct.unpack("<I", take(4))
        for _ in range(n_text):
            text = get_str()
            cache._text[text] = get_vec()
        if pos != len(view):
            raise CacheFormatError(f"trailing bytes in {path}")
        return cache


def normalize_text(text: str) -> str:
    """Lowercase and collapse whitespace; the canonical form for text keys."""
    return " ".join(text.lower().split())


def stable_seed(*tags) -> int:
    """Hash-derived RNG seed, stable across processes (unlike builtin hash)."""
    h = hashlib.blake2b("\x1f".join(str(t) for t in tags).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class StubProviders:
    """Deterministic stand-ins for the frozen region/text/global encoders and
    the region caption model.

    Text embeddings place each class at a seeded random unit vector; configured
    aliases sit at a fixed cosine (ALIAS_COSINE) from their canonical class,
    while distinct classes land nearly orthogonal for reasonable dimensions.
    Region embeddings for boxes covering a known object (IoU >= iou_thresh with
    the scene truth) are noisy copies of that class's text vector, mirroring a
    shared image-text space; uncovered boxes get an unrelated background
    vector. Captions are templated sentences naming the covered object's noun
    (canonical or alias) plus distractor words.
    """

    def __init__(
        self,
        dim: int,
        seed: int,
        aliases: dict[str, tuple[str, ...]] | None = None,
        scenes: dict[str, list[tuple[Box, str]]] | None = None,
        iou_thresh: float = 0.5,
        region_noise: float = 0.25,
        canonical_caption_prob: float = 0.7,
        anchor_weight: float = 0.0,
        related: dict[str, tuple[str, float]] | None = None,
    ):
        if dim < 2:
            raise ValueError("dimension must be >= 2")
        self.dim = int(dim)
        self.seed = int(seed)
        self.aliases = {k: tuple(v) for k, v in (aliases or {}).items()}
        self._alias_to_class = {
            normalize_text(a): c for c, al in self.aliases.items() for a in al
        }
        self.scenes = scenes or {}
        self.iou_thresh = float(iou_thresh)
        self.region_noise = float(region_noise)
        self.canonical_caption_prob = float(canonical_caption_prob)
        # real text encoders put all embeddings inside a narrow cone with
        # correlated classes; anchor_weight reproduces the cone and `related`
        # {class: (other class, cosine share)} the cross-class correlation
        self.anchor_weight = float(anchor_weight)
        self.related = {k: (v[0], float(v[1])) for k, v in (related or {}).items()}

    def _unit(self, *tags) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(stable_seed(self.seed, *tags)))
        return normalize(rng.standard_normal(self.dim))

    def _own_direction(self, noun: str, exclude: list[np.ndarray]) -> np.ndarray:
        vec = self._unit("class", noun)
        for basis in exclude:
            vec = vec - (vec @ basis) * basis
        return normalize(vec)

    def _class_embedding(self, name: str) -> np.ndarray:
        name = normalize_text(name)
        a = self.anchor_weight
        if a == 0.0 and name not in self.related:
            return self._unit("class", name)
        anchor = self._unit("anchor")
        if name in self.related:
            other, share = self.related[name]
            other_dir = self._own_direction(normalize_text(other), [anchor])
            own = self._own_direction(name, [anchor, other_dir])
            rest = np.sqrt(max(1.0 - a * a - share * share, 0.0))
            return a * anchor + share * other_dir + rest * own
        own = self._own_direction(name, [anchor])
        return a * anchor + np.sqrt(1.0 - a * a) * own

    def text_embedding(self, noun: str) -> np.ndarray:
        noun = normalize_text(noun)
        if noun in self._alias_to_class:
            base = self._class_embedding(self._alias_to_class[noun])
            raw = self._unit("alias", noun)
            perp = raw - (raw @ base) * base
            perp_norm = float(np.linalg.norm(perp))
            if perp_norm < 1e-12:
                return base
            perp = perp / perp_norm
            s = float(np.sqrt(1.0 - ALIAS_COSINE**2))
            return ALIAS_COSINE * base + s * perp
        return self._class_embedding(noun)

    def _covered_object(self, image_id: str, box: Box) -> str | None:
        best_iou = 0.0
        best_cls = None
        for gt_box, cls in self.scenes.get(image_id, []):
            v = iou(box, gt_box)
            if v > best_iou:
                best_iou = v
                best_cls = cls
        if best_iou >= self.iou_thresh:
            return best_cls
        return None

    def region_embedding(self, image_id: str, box: Box) -> np.ndarray:
        key = ("region", image_id, *(repr(c) for c in box.as_tuple()))
        cls = self._covered_object(image_id, box)
        if cls is None:
            return self._unit("regionbg", *key)
        base = self.text_embedding(cls)
        jitter = self._unit("regionjit", *key)
        return normalize(base + self.region_noise * jitter)

    def global_embedding(self, image_id: str) -> np.ndarray:
        objects = self.scenes.get(image_id, [])
        if not objects:
            return self._unit("globalbg", image_id)
        acc = np.zeros(self.dim)
        for _, cls in objects:
            acc += self.text_embedding(cls)
        return normalize(acc + 0.3 * self._unit("globaljit", image_id))

    _SCENERY = ("street", "table", "grass", "wall", "room", "field", "water", "sky")
    _OBJECT_TEMPLATES = (
        "a photo of a {noun} near the {scenery}",
        "a small {noun} sitting on the {scenery}",
        "there is a {noun} next to the {scenery}",
        "a blurry picture of a {noun} in the {scenery}",
    )
    _BACKGROUND_TEMPLATES = (
        "a blurry photo of the {scenery}",
        "an empty view of the {scenery}",
    )

    def caption(self, image_id: str, box: Box) -> str:
        key = ("caption", image_id, *(repr(c) for c in box.as_tuple()))
        rng = np.random.Generator(np.random.PCG64(stable_seed(self.seed, *key)))
        scenery = self._SCENERY[int(rng.integers(len(self._SCENERY)))]
        cls = self._covered_object(image_id, box)
        if cls is None:
            template = self._BACKGROUND_TEMPLATES[
                int(rng.integers(len(self._BACKGROUND_TEMPLATES)))
            ]
            return template.format(scenery=scenery)
        noun = cls
        alts = self.aliases.get(cls, ())
        if alts and float(rng.random()) >= self.canonical_caption_prob:
            noun = alts[int(rng.integers(len(alts)))]
        template = self._OBJECT_TEMPLATES[int(rng.integers(len(self._OBJECT_TEMPLATES)))]
        return template.format(noun=noun, scenery=scenery)
