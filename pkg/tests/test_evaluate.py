import numpy as np
import pytest
from oracle_utils import oracle_average_precision

from ovdistill.evaluate import (
    ErrorAnalysisReport,
    average_precision,
    evaluate_model,
    match_detections,
)
from ovdistill.geometry import Box, iou


def random_box(rng, size=100.0):
    x1, y1 = rng.uniform(0, size * 0.6, 2)
    w, h = rng.uniform(size * 0.1, size * 0.4, 2)
    return Box(x1, y1, x1 + w, y1 + h)


class TestAveragePrecision:
    def test_perfect_detector(self):
        rng = np.random.default_rng(3)
        gt = {f"img{i}": [random_box(rng) for _ in range(3)] for i in range(4)}
        dets = [
            (0.9 - 0.01 * k, image_id, box)
            for k, (image_id, boxes) in enumerate(gt.items())
            for box in boxes
        ]
        assert average_precision(dets, gt) == pytest.approx(1.0)

    def test_no_detections(self):
        gt = {"img": [Box(0, 0, 10, 10)]}
        assert average_precision([], gt) == 0.0

    def test_hand_computed_five_detection_case(self):
        # one image, 3 GT; flags T,F,T,F,T by construction:
        # precisions at TP ranks: 1/1, 2/3, 3/5; recalls 1/3, 2/3, 1
        # envelope precisions: 1, 2/3, 3/5 -> AP = (1 + 2/3 + 3/5)/3 = 34/45
        gts = [Box(0, 0, 10, 10), Box(20, 20, 30, 30), Box(40, 40, 50, 50)]
        gt = {"img": gts}
        far = Box(70, 70, 80, 80)
        dets = [
            (0.9, "img", gts[0]),
            (0.8, "img", far),
            (0.7, "img", gts[1]),
            (0.6, "img", Box(70, 0, 80, 10)),
            (0.5, "img", gts[2]),
        ]
        assert average_precision(dets, gt) == pytest.approx(34.0 / 45.0, abs=1e-12)

    def test_duplicate_detection_is_false_positive(self):
        gt = {"img": [Box(0, 0, 10, 10)]}
        dets = [(0.9, "img", Box(0, 0, 10, 10)), (0.8, "img", Box(0.5, 0, 10.5, 10))]
        flags = match_detections(sorted(dets, key=lambda d: -d[0]), gt)
        assert flags == [True, False]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            n_img = int(rng.integers(1, 4))
            gt = {
                f"img{i}": [random_box(rng) for _ in range(int(rng.integers(0, 4)))]
                for i in range(n_img)
            }
            dets = []
            for _ in range(int(rng.integers(1, 20))):
                image_id = f"img{int(rng.integers(n_img))}"
                if rng.random() < 0.5 and gt[image_id]:
                    base = gt[image_id][int(rng.integers(len(gt[image_id])))]
                    noisy = np.array(base.as_tuple()) + rng.normal(0, 2.0, 4)
                    if noisy[0] >= noisy[2] or noisy[1] >= noisy[3]:
                        continue
                    box = Box.from_array(noisy)
                else:
                    box = random_box(rng)
                dets.append((float(rng.random()), image_id, box))
            got = average_precision(dets, gt)
            want = oracle_average_precision(dets, gt, iou, 0.5)
            assert got == pytest.approx(want, abs=1e-12)


class TestErrorAnalysisReport:
    def test_invariant_holds(self):
        report = ErrorAnalysisReport(
            recall_count=10, selected_count=8,
            misclassified_as_base=5, wrong_novel=1, correct_novel=2,
        )
        report.check_invariant()

    def test_invariant_violation_detected(self):
        report = ErrorAnalysisReport(
            recall_count=10, selected_count=2,
            misclassified_as_base=5, wrong_novel=1, correct_novel=2,
        )
        with pytest.raises(AssertionError):
            report.check_invariant()

    def test_correct_rate(self):
        report = ErrorAnalysisReport(selected_count=8, correct_novel=6)
        assert report.correct_rate() == 0.75
        assert ErrorAnalysisReport().correct_rate() == 0.0


class TestEvaluateModelWithOracleDetector:
    """Feed the evaluator a detector whose final layer reproduces ground truth."""

    def _world_and_oracle(self):
        from ovdistill.detector import DetectorConfig, init_params
        from ovdistill.world import WorldConfig, generate_world, world_providers

        config = WorldConfig(n_train=4, n_eval=6, seed=19)
        world = generate_world(config)
        providers = world_providers(world)
        det_cfg = DetectorConfig(
            num_queries=12, num_layers=1, state_dim=8,
            embed_dim=config.embed_dim, hidden_dim=8,
        )
        params = init_params(det_cfg, config.channels, seed=1)
        return world, providers, det_cfg, params

    def test_oracle_detector_gets_unit_ap(self, monkeypatch):
        import ovdistill.evaluate as eval_mod

        world, providers, det_cfg, params = self._world_and_oracle()
        size = world.config.image_size
        names = list(world.config.base_classes) + list(world.config.novel_classes)
        annotations = world.annotations("eval")

        state = {"image_ids": world.image_ids("eval"), "next": 0}

        real_forward = eval_mod.forward

        def oracle_forward(p, inputs, cfg):
            fw = real_forward(p, inputs, cfg)
            image_id = state["image_ids"][state["next"]]
            state["next"] += 1
            objs = annotations[image_id]
            boxes = np.tile(np.array([0.0, 0.0, 0.02, 0.02]), (cfg.num_queries, 1))
            qhat = np.zeros((cfg.num_queries, world.config.embed_dim))
            for slot, (box, cls) in enumerate(objs):
                boxes[slot] = box.as_array() / size
                qhat[slot] = providers.text_embedding(cls)
            empty = np.full((cfg.num_queries, world.config.embed_dim), 1e-3)
            empty[: len(objs)] = qhat[: len(objs)]
            fw.boxes[-1] = boxes
            fw.qhat[-1] = empty
            fw.vis[-1] = empty.copy()
            return fw

        monkeypatch.setattr(eval_mod, "forward", oracle_forward)
        result = evaluate_model(params, det_cfg, world, providers.text_embedding, split="eval")
        for name, ap in result.per_class_ap.items():
            assert ap == pytest.approx(1.0, abs=1e-9), name
        assert result.base_map == pytest.approx(1.0)
        assert result.novel_map == pytest.approx(1.0)
        # a perfect detector classifies every selected novel object correctly
        assert result.error_report.correct_novel == result.error_report.selected_count
        assert result.error_report.misclassified_as_base == 0

    def test_zero_novel_scores_give_zero_correct(self, monkeypatch):
        import ovdistill.evaluate as eval_mod

        world, providers, det_cfg, params = self._world_and_oracle()
        size = world.config.image_size
        annotations = world.annotations("eval")
        base_names = list(world.config.base_classes)
        state = {"image_ids": world.image_ids("eval"), "next": 0}
        real_forward = eval_mod.forward

        def base_biased_forward(p, inputs, cfg):
            fw = real_forward(p, inputs, cfg)
            image_id = state["image_ids"][state["next"]]
            state["next"] += 1
            objs = annotations[image_id]
            boxes = np.tile(np.array([0.0, 0.0, 0.02, 0.02]), (cfg.num_queries, 1))
            qhat = np.full((cfg.num_queries, world.config.embed_dim), 1e-3)
            for slot, (box, _cls) in enumerate(objs):
                boxes[slot] = box.as_array() / size
                qhat[slot] = providers.text_embedding(base_names[0])  # always claim base
            fw.boxes[-1] = boxes
            fw.qhat[-1] = qhat
            fw.vis[-1] = qhat.copy()
            return fw

        monkeypatch.setattr(eval_mod, "forward", base_biased_forward)
        result = evaluate_model(params, det_cfg, world, providers.text_embedding, split="eval")
        assert result.error_report.correct_novel == 0
        assert result.error_report.selected_count > 0
        assert result.error_report.misclassified_as_base == result.error_report.selected_count

    def test_empty_split_rejected(self):
        world, providers, det_cfg, params = self._world_and_oracle()
        world.scenes["eval"] = {}
        world.pyramids["eval"] = {}
        with pytest.raises(ValueError):
            evaluate_model(params, det_cfg, world, providers.text_embedding, split="eval")
