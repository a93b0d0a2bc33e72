"""Synthetic open-vocabulary world: scenes of rectangular objects rendered
into feature pyramids whose local statistics encode the object class.

Each class owns a random channel signature; novel-class signatures are mixed
with a sibling base class's signature so that a detector trained only on base
annotations confuses them, while the stub teacher (whose embeddings live in
an independent text-aligned space) still tells them apart. Train images
contain unannotated novel objects, so the pseudo-box route has something to
discover. Everything derives deterministically from the world seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import StubProviders, normalize, stable_seed
from .geometry import Box, Proposal, read_proposals, write_proposals

__all__ = [
    "WorldConfig",
    "SyntheticWorld",
    "generate_world",
    "save_world",
    "load_world",
    "world_providers",
]

_DEFAULT_BASE = ("car", "dog", "chair", "tree", "boat", "horse", "bottle", "clock")
_DEFAULT_NOVEL = ("cat", "bus", "pizza", "umbrella")
_DEFAULT_ALIASES = {
    "cat": ("kitten", "tabby"),
    "bus": ("minibus", "coach"),
    "pizza": ("pie",),
    "umbrella": ("parasol",),
    "car": ("sedan",),
    "dog": ("puppy",),
}


@dataclass
class WorldConfig:
    base_classes: tuple[str, ...] = _DEFAULT_BASE
    novel_classes: tuple[str, ...] = _DEFAULT_NOVEL
    aliases: dict = field(default_factory=lambda: dict(_DEFAULT_ALIASES))
    n_train: int = 200
    n_eval: int = 50
    min_objects: int = 2
    max_objects: int = 4
    image_size: float = 256.0
    channels: int = 16
    level_shapes: tuple = ((24, 24), (12, 12))
    box_frac_range: tuple = (0.18, 0.45)
    max_object_iou: float = 0.3
    bg_noise: float = 0.1
    cell_noise: float = 0.1
    signature_amp: float = 1.0
    # every object also carries a shared class-agnostic component so that
    # localization can generalize from base to novel objects
    objectness_amp: float = 1.0
    novel_base_mix: float = 0.6
    text_anchor_weight: float = 0.4
    text_sibling_weight: float = 0.45
    proposal_jitter: float = 0.03
    n_distractor_proposals: int = 3
    object_objectness: tuple = (0.7, 0.95)
    distractor_objectness: tuple = (0.3, 0.6)
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        self.base_classes = tuple(self.base_classes)
        self.novel_classes = tuple(self.novel_classes)
        self.aliases = {k: tuple(v) for k, v in self.aliases.items()}
        self.level_shapes = tuple(tuple(s) for s in self.level_shapes)
        self.box_frac_range = tuple(self.box_frac_range)
        self.object_objectness = tuple(self.object_objectness)
        self.distractor_objectness = tuple(self.distractor_objectness)
        if len(self.base_classes) < 2 or len(self.novel_classes) < 1:
            raise ValueError("need at least 2 base classes and 1 novel class")
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise ValueError(f"base/novel split must be disjoint, shared: {overlap}")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("invalid object count range")

    @property
    def all_classes(self) -> tuple[str, ...]:
        return self.base_classes + self.novel_classes

    def is_novel(self, name: str) -> bool:
        return name in self.novel_classes


@dataclass
class SyntheticWorld:
    config: WorldConfig
    scenes: dict  # split -> image_id -> list[(Box, class_name)]
    pyramids: dict  # split -> image_id -> list[np.ndarray]
    proposals: dict  # split -> list[Proposal]

    def image_ids(self, split: str) -> list[str]:
        return sorted(self.scenes[split])

    def annotations(self, split: str) -> dict[str, list[tuple[Box, str]]]:
        """Supervision annotations: base-only on train, all classes on eval."""
        out = {}
        for image_id, objects in self.scenes[split].items():
            if split == "train":
                objects = [(b, c) for b, c in objects if not self.config.is_novel(c)]
            out[image_id] = list(objects)
        return out


def objectness_signature(config: WorldConfig) -> np.ndarray:
    """Channel pattern shared by every rendered object regardless of class."""
    rng = np.random.Generator(np.random.PCG64(stable_seed(config.seed, "sig_objectness")))
    return normalize(rng.standard_normal(config.channels))


def class_signatures(config: WorldConfig) -> dict[str, np.ndarray]:
    """Per-class channel signatures; novel classes lean on a sibling base class."""
    sigs: dict[str, np.ndarray] = {}
    for name in config.base_classes:
        rng = np.random.Generator(np.random.PCG64(stable_seed(config.seed, "sig", name)))
        sigs[name] = normalize(rng.standard_normal(config.channels))
    rho = config.novel_base_mix
    for i, name in enumerate(config.novel_classes):
        sibling = sigs[config.base_classes[i % len(config.base_classes)]]
        rng = np.random.Generator(np.random.PCG64(stable_seed(config.seed, "sig", name)))
        own = rng.standard_normal(config.channels)
        own = own - (own @ sibling) * sibling
        own = normalize(own)
        sigs[name] = rho * sibling + np.sqrt(1.0 - rho * rho) * own
    return sigs


def _sample_box(rng, config: WorldConfig) -> Box:
    lo, hi = config.box_frac_range
    w = rng.uniform(lo, hi) * config.image_size
    h = rng.uniform(lo, hi) * config.image_size
    cx = rng.uniform(w / 2, config.image_size - w / 2)
    cy = rng.uniform(h / 2, config.image_size - h / 2)
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _sample_scene(rng, config: WorldConfig) -> list[tuple[Box, str]]:
    from .geometry import iou

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[tuple[Box, str]] = []
    classes = config.all_classes
    for _ in range(n_objects):
        cls = classes[int(rng.integers(len(classes)))]
        for _attempt in range(50):
            box = _sample_box(rng, config)
            if all(iou(box, b) <= config.max_object_iou for b, _ in objects):
                objects.append((box, cls))
                break
    return objects


def _render_pyramid(rng, scene, config: WorldConfig, signatures, obj_sig) -> list[np.ndarray]:
    levels = []
    for h, w in config.level_shapes:
        level = config.bg_noise * rng.standard_normal((config.channels, h, w))
        ys = (np.arange(h) + 0.5) / h * config.image_size
        xs = (np.arange(w) + 0.5) / w * config.image_size
        for box, cls in scene:
            row_in = (ys >= box.y1) & (ys < box.y2)
            col_in = (xs >= box.x1) & (xs < box.x2)
            mask = np.outer(row_in, col_in)
            if not mask.any():
                continue
            sig = config.signature_amp * signatures[cls] + config.objectness_amp * obj_sig
            noise = config.cell_noise * rng.standard_normal((config.channels, int(mask.sum())))
            level[:, mask] += sig[:, None] + noise
        levels.append(level)
    return levels


def _jittered_box(rng, box: Box, config: WorldConfig) -> Box:
    scale = config.proposal_jitter * config.image_size
    for _ in range(20):
        coords = box.as_array() + scale * rng.standard_normal(4)
        coords[0::2] = np.clip(coords[0::2], 0.0, config.image_size)
        coords[1::2] = np.clip(coords[1::2], 0.0, config.image_size)
        if coords[0] < coords[2] and coords[1] < coords[3]:
            return Box.from_array(coords)
    return box


def _image_proposals(rng, image_id, scene, config: WorldConfig) -> list[Proposal]:
    proposals = []
    lo, hi = config.object_objectness
    for box, _cls in scene:
        proposals.append(Proposal(image_id, _jittered_box(rng, box, config), float(rng.uniform(lo, hi))))
    dlo, dhi = config.distractor_objectness
    for _ in range(config.n_distractor_proposals):
        proposals.append(Proposal(image_id, _sample_box(rng, config), float(rng.uniform(dlo, dhi))))
    return proposals


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Build scenes, pyramids and proposals for both splits, deterministically."""
    signatures = class_signatures(config)
    obj_sig = objectness_signature(config)
    scenes: dict = {}
    pyramids: dict = {}
    proposals: dict = {}
    for split, count in (("train", config.n_train), ("eval", config.n_eval)):
        scenes[split] = {}
        pyramids[split] = {}
        proposals[split] = []
        for idx in range(count):
            image_id = f"{split}_{idx:04d}"
            rng = np.random.Generator(np.random.PCG64(stable_seed(config.seed, "image", image_id)))
            scene = _sample_scene(rng, config)
            scenes[split][image_id] = scene
            pyramids[split][image_id] = _render_pyramid(rng, scene, config, signatures, obj_sig)
            proposals[split].extend(_image_proposals(rng, image_id, scene, config))
    return SyntheticWorld(config=config, scenes=scenes, pyramids=pyramids, proposals=proposals)


def _write_annotations(path, entries) -> None:
    lines = []
    for image_id in sorted(entries):
        for box, cls in entries[image_id]:
            lines.append(
                "\t".join([image_id, repr(box.x1), repr(box.y1), repr(box.x2), repr(box.y2), cls])
            )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _read_annotations(path) -> dict[str, list[tuple[Box, str]]]:
    out: dict[str, list] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        image_id, x1, y1, x2, y2, cls = line.split("\t")
        out.setdefault(image_id, []).append(
            (Box(float(x1), float(y1), float(x2), float(y2)), cls)
        )
    return out


_FEATURE_MAGIC = b"OVDF"


def _write_features(path, pyramids: dict) -> None:
    out = bytearray()
    out += _FEATURE_MAGIC
    out += struct.pack("<II", 1, len(pyramids))
    for image_id in sorted(pyramids):
        raw = image_id.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
        levels = pyramids[image_id]
        out += struct.pack("<I", len(levels))
        for level in levels:
            c, h, w = level.shape
            out += struct.pack("<III", c, h, w)
            out += level.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def _read_features(path) -> dict[str, list[np.ndarray]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        chunk = data[pos : pos + n]
        if len(chunk) != n:
            raise ValueError(f"truncated feature file {path}")
        pos += n
        return chunk

    if take(4) != _FEATURE_MAGIC:
        raise ValueError(f"bad magic in feature file {path}")
    _version, n_images = struct.unpack("<II", take(8))
    out = {}
    for _ in range(n_images):
        (n_raw,) = struct.unpack("<I", take(4))
        image_id = take(n_raw).decode("utf-8")
        (n_levels,) = struct.unpack("<I", take(4))
        levels = []
        for _ in range(n_levels):
            c, h, w = struct.unpack("<III", take(12))
            arr = np.frombuffer(take(8 * c * h * w), dtype="<f8").reshape(c, h, w).copy()
            levels.append(arr)
        out[image_id] = levels
    return out


def save_world(world: SyntheticWorld, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "world.json").write_text(
        json.dumps({"config": asdict(world.config)}, indent=2, sort_keys=True) + "\n"
    )
    for split in ("train", "eval"):
        _write_annotations(out / f"annotations_{split}.tsv", world.annotations(split))
        _write_annotations(out / f"scenes_{split}.tsv", world.scenes[split])
        _write_features(out / f"features_{split}.bin", world.pyramids[split])
        write_proposals(out / f"proposals_{split}.tsv", world.proposals[split])


def load_world(world_dir) -> SyntheticWorld:
    root = Path(world_dir)
    meta = root / "world.json"
    if not meta.exists():
        raise FileNotFoundError(f"missing world metadata file: {meta}")
    config = WorldConfig(**json.loads(meta.read_text())["config"])
    scenes = {}
    pyramids = {}
    proposals = {}
    for split in ("train", "eval"):
        scenes[split] = _read_annotations(root / f"scenes_{split}.tsv")
        pyramids[split] = _read_features(root / f"features_{split}.bin")
        proposals[split] = read_proposals(root / f"proposals_{split}.tsv")
    return SyntheticWorld(config=config, scenes=scenes, pyramids=pyramids, proposals=proposals)


def world_providers(world: SyntheticWorld) -> StubProviders:
    """Stub teacher wired to the world's full truth (it plays the frozen CLIP)."""
    scenes = {}
    for split in world.scenes:
        scenes.update(world.scenes[split])
    cfg = world.config
    related = {
        novel: (cfg.base_classes[i % len(cfg.base_classes)], cfg.text_sibling_weight)
        for i, novel in enumerate(cfg.novel_classes)
    }
    return StubProviders(
        dim=cfg.embed_dim,
        seed=cfg.seed,
        aliases=cfg.aliases,
        scenes=scenes,
        anchor_weight=cfg.text_anchor_weight,
        related=related,
    )
