"""Run configuration: one document bundling world, pipeline, distillation,
detector, training, ensemble and evaluation settings.

Config files are plain YAML key-value documents; sections and keys mirror
the dataclasses below and unknown names are rejected. The library defaults
carry the full-scale settings (300 queries, big queues); ``toy_config``
returns the desk-scale setup used by the synthetic experiment.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .detector import DetectorConfig
from .ensemble import EnsembleConfig
from .losses import DistillConfig
from .pseudolabels import PipelineConfig
from .train import TrainConfig
from .world import WorldConfig

__all__ = ["EvalConfig", "RunConfig", "toy_config", "load_config", "dump_config"]


@dataclass
class EvalConfig:
    split: str = "eval"
    iou_thresh: float = 0.5
    top_n: int = 100


@dataclass
class RunConfig:
    seed: int = 7
    world: WorldConfig = field(default_factory=WorldConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def apply_seed(self, seed: int) -> None:
        self.seed = int(seed)
        self.world.seed = int(seed)
        self.train.seed = int(seed)


def toy_config() -> RunConfig:
    """Desk-scale defaults: a small detector that trains in seconds."""
    cfg = RunConfig()
    cfg.detector = DetectorConfig(num_queries=30, num_layers=2)
    cfg.distill.num_layers = cfg.detector.num_layers
    cfg.train = TrainConfig(steps=400, lr=0.5, batch_size=2)
    cfg.apply_seed(cfg.seed)
    return cfg


_SECTIONS = {
    "world": WorldConfig,
    "pipeline": PipelineConfig,
    "distill": DistillConfig,
    "detector": DetectorConfig,
    "train": TrainConfig,
    "ensemble": EnsembleConfig,
    "eval": EvalConfig,
}


def _apply_section(obj, data: dict, section: str):
    known = {f.name for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} in config section {section!r}")
        setattr(obj, key, value)
    # rerun validation with the merged values
    return type(obj)(**{f.name: getattr(obj, f.name) for f in fields(obj)})


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Load a YAML config document on top of the toy defaults."""
    cfg = base or toy_config()
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    if "seed" in raw:
        cfg.apply_seed(raw.pop("seed"))
    for section, data in raw.items():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section {section!r}")
        if not isinstance(data, dict):
            raise ValueError(f"config section {section!r} must be a mapping")
        merged = _apply_section(getattr(cfg, section), data, section)
        setattr(cfg, section, merged)
    cfg.distill.num_layers = cfg.detector.num_layers
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    doc = {"seed": cfg.seed}
    for section in _SECTIONS:
        doc[section] = asdict(getattr(cfg, section))
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))
