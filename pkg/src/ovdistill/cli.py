"""Command-line surface: gen-world, extract-embeddings, pseudo-label, train,
eval, report. Artifacts live under the --out directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, toy_config
from .embeddings import EmbeddingCache
from .ensemble import EnsembleConfig, write_detections
from .evaluate import evaluate_checkpoint
from .pseudolabels import (
    extract_embedding_cache,
    read_pseudo_boxes,
    read_pseudo_labels,
    run_pipeline,
    write_pseudo_boxes,
    write_pseudo_labels,
)
from .train import train
from .world import generate_world, load_world, save_world, world_providers


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovdistill",
        description="Synthetic open-vocabulary distillation harness",
    )
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument("--seed", type=int, help="override world and training seeds")
    parser.add_argument("--out", type=Path, default=Path("runs/toy"), help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-world", help="generate the synthetic dataset")
    sub.add_parser("extract-embeddings", help="pre-extract all teacher embeddings to the cache")
    sub.add_parser("pseudo-label", help="run the pseudo text label pipeline")

    p_train = sub.add_parser("train", help="train the toy detector")
    p_train.add_argument("--steps", type=int, help="override training step count")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, help="checkpoint path (default <out>/checkpoint.npz)")
    p_eval.add_argument("--split", choices=("train", "eval"), help="split to evaluate")
    p_eval.add_argument(
        "--betas",
        action="append",
        metavar="B1:B2",
        help="ensemble coefficient pair; repeat for a sweep (one report row per pair)",
    )

    p_report = sub.add_parser("report", help="summarize a metrics log")
    p_report.add_argument("--metrics", type=Path, help="metrics log (default <out>/metrics.jsonl)")
    p_report.add_argument("--plot", action="store_true", help="also write loss curve images")
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = toy_config()
    if args.config is not None:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    return cfg


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run `ovdistill {hint}` first")
    return path


def _cache_lookups(cache: EmbeddingCache):
    def region(image_id, box):
        vec = cache.get_region(image_id, box)
        if vec is None:
            raise KeyError(f"region embedding missing from cache: {image_id} {box.as_tuple()}")
        return vec

    def text(noun):
        vec = cache.get_text(noun)
        if vec is None:
            raise KeyError(f"text embedding missing from cache: {noun!r}")
        return vec

    def global_(image_id):
        vec = cache.get_global(image_id)
        if vec is None:
            raise KeyError(f"global embedding missing from cache: {image_id}")
        return vec

    return region, text, global_


def _proposals_by_image(world, split: str):
    grouped: dict[str, list] = {}
    for pr in world.proposals[split]:
        grouped.setdefault(pr.image_id, []).append(pr)
    return grouped


def cmd_gen_world(cfg: RunConfig, args) -> int:
    world = generate_world(cfg.world)
    save_world(world, args.out / "world")
    n_train = len(world.scenes["train"])
    n_eval = len(world.scenes["eval"])
    print(f"world written to {args.out / 'world'} ({n_train} train / {n_eval} eval images)")
    return 0


def cmd_extract_embeddings(cfg: RunConfig, args) -> int:
    world = load_world(_require(args.out / "world", "gen-world"))
    cache = extract_embedding_cache(world, world_providers(world), cfg.pipeline)
    cache.save(args.out / "cache.bin")
    print(f"cached {len(cache)} embeddings to {args.out / 'cache.bin'}")
    return 0


def cmd_pseudo_label(cfg: RunConfig, args) -> int:
    world = load_world(_require(args.out / "world", "gen-world"))
    cache_path = args.out / "cache.bin"
    cache = EmbeddingCache.load(cache_path) if cache_path.exists() else None
    gt_boxes = {
        image_id: [box for box, _cls in objs]
        for image_id, objs in world.annotations("train").items()
    }
    records, boxes, report = run_pipeline(
        _proposals_by_image(world, "train"), gt_boxes, world_providers(world), cfg.pipeline, cache
    )
    write_pseudo_labels(args.out / "pseudo_labels.tsv", records)
    write_pseudo_boxes(args.out / "pseudo_boxes.tsv", boxes)
    report.save(args.out / "pipeline_report.json")
    print(
        f"labeled {report.n_labeled}/{report.n_pseudo_boxes} pseudo boxes "
        f"({report.n_skipped_missing_embedding} skipped)"
    )
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    world = load_world(_require(args.out / "world", "gen-world"))
    cache = EmbeddingCache.load(_require(args.out / "cache.bin", "extract-embeddings"))
    records = read_pseudo_labels(_require(args.out / "pseudo_labels.tsv", "pseudo-label"))
    boxes = read_pseudo_boxes(_require(args.out / "pseudo_boxes.tsv", "pseudo-label"))
    region, text, global_ = _cache_lookups(cache)
    if args.steps is not None:
        cfg.train.steps = args.steps
    model = train(
        world, records, boxes, region, text, global_,
        cfg.detector, cfg.distill, cfg.train, args.out,
    )
    print(f"trained {cfg.train.steps} steps; checkpoint at {model.checkpoint_path}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    world = load_world(_require(args.out / "world", "gen-world"))
    cache = EmbeddingCache.load(_require(args.out / "cache.bin", "extract-embeddings"))
    _region, text, _global = _cache_lookups(cache)
    checkpoint = args.checkpoint or (args.out / "checkpoint.npz")
    _require(checkpoint, "train")
    split = args.split or cfg.eval.split

    beta_pairs = []
    if args.betas:
        for spec in args.betas:
            b1, b2 = (float(v) for v in spec.split(":"))
            beta_pairs.append((b1, b2))
    else:
        beta_pairs.append((cfg.ensemble.beta1, cfg.ensemble.beta2))

    rows = []
    result = None
    for b1, b2 in beta_pairs:
        result = evaluate_checkpoint(
            checkpoint, world, text,
            split=split,
            distill_cfg=cfg.distill,
            ens_cfg=EnsembleConfig(beta1=b1, beta2=b2),
            iou_thresh=cfg.eval.iou_thresh,
            top_n=cfg.eval.top_n,
        )
        rows.append((b1, b2, result))
        print(
            f"beta1={b1} beta2={b2} base mAP={result.base_map:.4f} "
            f"novel mAP={result.novel_map:.4f} "
            f"correct-novel rate={result.error_report.correct_rate():.3f}"
        )

    result.save(args.out / "eval_report.json")
    write_detections(args.out / "detections.tsv", result.detections)
    if len(rows) > 1:
        lines = ["beta1\tbeta2\tbase_map\tnovel_map"]
        for b1, b2, res in rows:
            lines.append(f"{b1}\t{b2}\t{repr(res.base_map)}\t{repr(res.novel_map)}")
        (args.out / "eval_sweep.tsv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    metrics = args.metrics or (args.out / "metrics.jsonl")
    _require(metrics, "train")
    steps = []
    for line in metrics.read_text().splitlines():
        if line.strip():
            steps.append(json.loads(line))
    if not steps:
        raise ValueError(f"metrics log {metrics} is empty")

    header = ["step", "cls", "box", "ckd_ins", "rkd_ins", "ckd_img", "total"]
    lines = ["\t".join(header)]
    for row in steps:
        lines.append(
            "\t".join(
                [
                    str(row["step"]),
                    repr(sum(row["cls"])),
                    repr(sum(row["box"])),
                    repr(sum(row["ckd_ins"])),
                    repr(sum(row["rkd_ins"])),
                    repr(row["ckd_img"]),
                    repr(row["total"]),
                ]
            )
        )
    table_path = args.out / "report_table.tsv"
    table_path.write_text("\n".join(lines) + "\n")
    print(f"wrote {table_path} ({len(steps)} steps)")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        xs = [row["step"] for row in steps]
        fig, ax = plt.subplots(figsize=(8, 5))
        for key in ("cls", "box", "ckd_ins", "rkd_ins"):
            ax.plot(xs, [sum(row[key]) for row in steps], label=key)
        ax.plot(xs, [row["ckd_img"] for row in steps], label="ckd_img")
        ax.plot(xs, [row["total"] for row in steps], label="total", linewidth=2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        plot_path = args.out / "loss_curves.png"
        fig.savefig(plot_path)
        plt.close(fig)
        print(f"wrote {plot_path}")
    return 0


_COMMANDS = {
    "gen-world": cmd_gen_world,
    "extract-embeddings": cmd_extract_embeddings,
    "pseudo-label": cmd_pseudo_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_run_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
