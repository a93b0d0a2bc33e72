import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from ovdistill.geometry import Box
from ovdistill.matching import Assignment, CostWeights, Target, match, split_supervision


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Exhaustive minimum over all one-to-one assignments of targets to queries."""
    n, t = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(n), t):
        total = sum(cost[q, j] for j, q in enumerate(perm))
        best = min(best, total)
    return best


def random_targets(rng, n, num_base, num_pseudo):
    targets = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 0.5, 2)
        w, h = rng.uniform(0.1, 0.4, 2)
        box = Box(x1, y1, x1 + w, y1 + h)
        if rng.random() < 0.5 and num_pseudo > 0:
            targets.append(Target(box=box, kind="pseudo", index=int(rng.integers(num_pseudo))))
        else:
            targets.append(Target(box=box, kind="base", index=int(rng.integers(num_base))))
    return targets


def build_cost(pred_scores, pred_boxes, targets, num_base, w=CostWeights()):
    """Reference cost assembly mirroring the matching contract."""
    from ovdistill.geometry import giou_pairs

    n = pred_boxes.shape[0]
    cost = np.zeros((n, len(targets)))
    for j, t in enumerate(targets):
        col = t.index if t.kind == "base" else num_base + t.index
        tb = np.broadcast_to(t.box.as_array(), (n, 4))
        cost[:, j] = (
            w.cls * -pred_scores[:, col]
            + w.l1 * np.abs(pred_boxes - tb).sum(axis=1)
            + w.giou * -giou_pairs(pred_boxes, tb)
        )
    return cost


class TestMatch:
    def test_single_forced_pair(self):
        scores = np.array([[0.9]])
        boxes = np.array([[0.1, 0.1, 0.4, 0.4]])
        targets = [Target(Box(0.1, 0.1, 0.4, 0.4), "base", 0)]
        assignment = match(scores, boxes, targets, num_base=1)
        assert assignment.pairs == ((0, 0),)

    def test_hand_built_cost_matrix(self):
        # cost [[1,9],[9,1],[5,5]] -> pairs (0,0),(1,1) with total 2
        cost = np.array([[1.0, 9.0], [9.0, 1.0], [5.0, 5.0]])
        rows, cols = linear_sum_assignment(cost)
        pairs = sorted(zip(rows.tolist(), cols.tolist()))
        assert pairs == [(0, 0), (1, 1)]
        assert cost[rows, cols].sum() == 2.0

    def test_too_few_queries(self):
        scores = np.array([[0.9]])
        boxes = np.array([[0.1, 0.1, 0.4, 0.4]])
        targets = [
            Target(Box(0.1, 0.1, 0.4, 0.4), "base", 0),
            Target(Box(0.5, 0.5, 0.9, 0.9), "base", 0),
        ]
        with pytest.raises(ValueError):
            match(scores, boxes, targets, num_base=1)

    def test_matches_brute_force_on_random_cases(self):
        rng = np.random.default_rng(23)
        num_base, num_pseudo = 3, 2
        for _ in range(200):
            n_query = int(rng.integers(4, 7))
            n_target = int(rng.integers(1, min(n_query, 5) + 1))
            scores = rng.random((n_query, num_base + num_pseudo))
            boxes = np.stack(
                [
                    np.array([x, y, x + w, y + h])
                    for x, y, w, h in zip(
                        rng.uniform(0, 0.5, n_query),
                        rng.uniform(0, 0.5, n_query),
                        rng.uniform(0.1, 0.5, n_query),
                        rng.uniform(0.1, 0.5, n_query),
                    )
                ]
            )
            targets = random_targets(rng, n_target, num_base, num_pseudo)
            assignment = match(scores, boxes, targets, num_base)
            cost = build_cost(scores, boxes, targets, num_base)
            total = sum(cost[q, t] for q, t in assignment.pairs)
            assert total == pytest.approx(brute_force_min_cost(cost), abs=1e-9)
            # one-to-one over all targets
            assert len({q for q, _ in assignment.pairs}) == n_target
            assert sorted(t for _, t in assignment.pairs) == list(range(n_target))

    def test_label_invariance_under_target_permutation(self):
        rng = np.random.default_rng(29)
        for _ in range(30):
            n_query, n_target = 6, 4
            scores = rng.random((n_query, 5))
            boxes = rng.uniform(0, 0.4, (n_query, 2))
            boxes = np.concatenate([boxes, boxes + rng.uniform(0.1, 0.4, (n_query, 2))], axis=1)
            targets = random_targets(rng, n_target, 3, 2)
            assignment = match(scores, boxes, targets, 3)
            perm = rng.permutation(n_target).tolist()
            permuted = [targets[j] for j in perm]
            assignment_p = match(scores, boxes, permuted, 3)
            remapped = sorted((q, perm.index(t)) for q, t in assignment.pairs)
            assert remapped == sorted(assignment_p.pairs)

    def test_deterministic(self):
        rng = np.random.default_rng(31)
        scores = rng.random((5, 4))
        boxes = np.tile(np.array([0.1, 0.1, 0.5, 0.5]), (5, 1)) + rng.uniform(0, 0.01, (5, 4))
        boxes[:, 2:] += 0.2
        targets = random_targets(rng, 3, 2, 2)
        first = match(scores, boxes, targets, 2)
        for _ in range(5):
            assert match(scores, boxes, targets, 2) == first


class TestSplitSupervision:
    def _targets(self, kinds):
        return [
            Target(Box(0.1 * (i + 1), 0.1, 0.1 * (i + 1) + 0.2, 0.4), kind, i)
            for i, kind in enumerate(kinds)
        ]

    def test_all_base(self):
        targets = self._targets(["base", "base"])
        assignment = Assignment(pairs=((0, 0), (1, 1)))
        cls_pairs, box_pairs = split_supervision(assignment, targets)
        assert cls_pairs == box_pairs == [(0, 0), (1, 1)]

    def test_all_pseudo(self):
        targets = self._targets(["pseudo", "pseudo"])
        assignment = Assignment(pairs=((0, 0), (1, 1)))
        cls_pairs, box_pairs = split_supervision(assignment, targets)
        assert len(cls_pairs) == 2
        assert box_pairs == []

    def test_mixed_counts(self):
        targets = self._targets(["base", "pseudo", "base", "pseudo", "pseudo"])
        assignment = Assignment(pairs=tuple((i, i) for i in range(5)))
        cls_pairs, box_pairs = split_supervision(assignment, targets)
        assert len(cls_pairs) == 5
        assert len(box_pairs) == 2
        assert all(targets[t].kind == "base" for _, t in box_pairs)

    def test_no_pseudo_in_box_supervision(self):
        rng = np.random.default_rng(37)
        for _ in range(20):
            kinds = ["base" if rng.random() < 0.5 else "pseudo" for _ in range(6)]
            targets = self._targets(kinds)
            assignment = Assignment(pairs=tuple((i, i) for i in range(6)))
            _, box_pairs = split_supervision(assignment, targets)
            assert all(targets[t].kind != "pseudo" for _, t in box_pairs)
