"""Scratch calibration driver (not part of the package)."""
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from ovdistill.detector import DetectorConfig, forward, prepare_image
from ovdistill.evaluate import evaluate_model
from ovdistill.losses import DistillConfig
from ovdistill.pseudolabels import PipelineConfig, run_pipeline
from ovdistill.train import TrainConfig, train
from ovdistill.world import WorldConfig, generate_world, world_providers


def build(world_kw):
    world = generate_world(WorldConfig(**world_kw))
    providers = world_providers(world)
    gt_boxes = {img: [b for b, _ in objs] for img, objs in world.annotations("train").items()}
    props = {}
    for pr in world.proposals["train"]:
        props.setdefault(pr.image_id, []).append(pr)
    records, boxes, report = run_pipeline(props, gt_boxes, providers, PipelineConfig())
    return world, providers, records, boxes


def alignment_stats(world, providers, model, det_cfg):
    """Mean cosine of matched-ish quantities on a few train images."""
    from ovdistill.embeddings import cosine

    sims_v, sims_t = [], []
    ann = world.annotations("train")
    for image_id in world.image_ids("train")[:10]:
        inputs = prepare_image(world.pyramids["train"][image_id])
        fw = forward(model.params, inputs, det_cfg)
        boxes = fw.boxes[-1] * world.config.image_size
        for box, cls in ann[image_id]:
            # nearest query box by IoU
            from ovdistill.geometry import Box, iou

            best_q, best_i = None, 0.0
            for q in range(det_cfg.num_queries):
                b = boxes[q]
                if b[0] >= b[2] or b[1] >= b[3]:
                    continue
                v = iou(Box(*b), box)
                if v > best_i:
                    best_q, best_i = q, v
            if best_q is None:
                continue
            region = providers.region_embedding(image_id, box)
            text = providers.text_embedding(cls)
            sims_v.append(cosine(fw.vis[-1][best_q], region))
            sims_t.append(cosine(fw.qhat[-1][best_q], text))
    return float(np.mean(sims_v)), float(np.mean(sims_t))


def run(tag, world, providers, records, boxes, det_kw, dist_kw, train_kw):
    det_cfg = DetectorConfig(**det_kw)
    dist_cfg = DistillConfig(num_layers=det_cfg.num_layers, **dist_kw)
    tr_cfg = TrainConfig(**train_kw)
    out = Path(tempfile.mkdtemp())
    t0 = time.time()
    model = train(
        world, records, boxes,
        providers.region_embedding, providers.text_embedding, providers.global_embedding,
        det_cfg, dist_cfg, tr_cfg, out,
    )
    t_train = time.time() - t0
    lines = model.metrics_path.read_text().splitlines()
    first, last = json.loads(lines[0]), json.loads(lines[-1])
    res = evaluate_model(model.params, det_cfg, world, providers.text_embedding, distill_cfg=dist_cfg)
    sv, st_ = alignment_stats(world, providers, model, det_cfg)
    er = res.error_report
    print(
        f"[{tag}] {t_train:.1f}s loss {first['total']:.1f}->{last['total']:.1f} "
        f"| align v {sv:.2f} t {st_:.2f} | baseAP {res.base_map:.3f} novelAP {res.novel_map:.3f} "
        f"| recall {er.recall_count}/{er.total_novel_gt} sel {er.selected_count} "
        f"base/wrong/correct {er.misclassified_as_base}/{er.wrong_novel}/{er.correct_novel} "
        f"rate {er.correct_rate():.2f}"
    )
    return res


if __name__ == "__main__":
    world_kw = dict(n_train=60, n_eval=20, seed=3)
    world, providers, records, boxes = build(world_kw)
    print(f"pseudo labels: {len(records)}")
    det = dict(num_queries=30, num_layers=2)
    for lr in (0.005, 0.01, 0.02):
        for steps in (300,):
            dist = dict(instance_queue_capacity=128, image_queue_capacity=64)
            tr = dict(steps=steps, lr=lr, batch_size=4, seed=7)
            run(f"full lr={lr} s={steps}", world, providers, records, boxes, det, dist, tr)
