"""Central finite-difference checks for every hand-derived gradient."""

import numpy as np
import pytest
from oracle_utils import finite_difference_grad, relative_error

from ovdistill.embeddings import normalize
from ovdistill.losses import (
    box_loss,
    build_classification_targets,
    ckd_image,
    ckd_instance,
    classification_loss,
    column_weight_vector,
    rkd_instance,
)

STEP = 1e-5
REL_TOL = 1e-4
N_CASES = 25


def rows(rng, n, d, unit=True):
    out = rng.normal(size=(n, d))
    if unit:
        out = out / np.linalg.norm(out, axis=1, keepdims=True)
    return out


class TestCkdInstanceGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(211)
        for case in range(N_CASES):
            n = int(rng.integers(1, 5))
            p = int(rng.integers(0, 4))
            d = int(rng.integers(3, 9))
            q = rows(rng, n, d, unit=False) * rng.uniform(0.5, 2.0)
            e = rows(rng, n, d)
            x = rows(rng, p, d) if p else np.zeros((0, d))
            _, grad = ckd_instance(q, e, x, tau=20.0, return_grad=True)
            fd = finite_difference_grad(lambda arr: ckd_instance(arr, e, x, tau=20.0), q, STEP)
            assert relative_error(grad, fd) <= REL_TOL, f"case {case}"


class TestRkdInstanceGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(223)
        for case in range(N_CASES):
            n = int(rng.integers(2, 5))
            d = int(rng.integers(3, 9))
            q = rows(rng, n, d, unit=False) * rng.uniform(0.5, 2.0)
            e = rows(rng, n, d)
            _, grad = rkd_instance(q, e, tau=5.0, return_grad=True)
            fd = finite_difference_grad(lambda arr: rkd_instance(arr, e, tau=5.0), q, STEP)
            assert relative_error(grad, fd) <= REL_TOL, f"case {case}"


class TestClassificationGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(227)
        for case in range(N_CASES):
            n = int(rng.integers(1, 5))
            m = int(rng.integers(1, 4))
            k = int(rng.integers(0, 3))
            d = int(rng.integers(3, 9))
            q = rows(rng, n, d, unit=False) * rng.uniform(0.5, 2.0)
            embs = rows(rng, m + k, d)
            n_matched = int(rng.integers(0, min(n, m + k) + 1))
            queries = rng.permutation(n)[:n_matched]
            cols = rng.permutation(m + k)[:n_matched]
            y = build_classification_targets(
                [(int(qi), i) for i, qi in enumerate(queries)],
                [int(c) for c in cols], n, m + k,
            )
            colw = column_weight_vector(m, rng.uniform(0.2, 0.9, size=k))

            def f(arr):
                return classification_loss(
                    arr, embs, y, colw, tau=50.0, gamma=2.0, balance=0.25
                )

            _, grad = classification_loss(
                q, embs, y, colw, tau=50.0, gamma=2.0, balance=0.25, return_grad=True
            )
            fd = finite_difference_grad(f, q, STEP)
            assert relative_error(grad, fd) <= REL_TOL, f"case {case}"

    def test_row_mask_grad(self):
        rng = np.random.default_rng(229)
        q = rows(rng, 3, 5, unit=False)
        embs = rows(rng, 4, 5)
        y = np.zeros((3, 4))
        y[0, 1] = 1.0
        mask = np.array([True, False, True])

        def f(arr):
            return classification_loss(arr, embs, y, row_mask=mask)

        _, grad = classification_loss(q, embs, y, row_mask=mask, return_grad=True)
        fd = finite_difference_grad(f, q, STEP)
        assert relative_error(grad, fd) <= REL_TOL
        np.testing.assert_array_equal(grad[1], 0.0)


class TestCkdImageGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(233)
        for case in range(N_CASES):
            m = int(rng.integers(1, 5))
            p = int(rng.integers(0, 4))
            d = int(rng.integers(3, 9))
            x = rows(rng, m, d, unit=False) * rng.uniform(0.5, 2.0)
            e = rows(rng, m, d)
            extras = rows(rng, p, d) if p else np.zeros((0, d))
            _, grad = ckd_image(x, e, extras, tau=20.0, return_grad=True)
            fd = finite_difference_grad(lambda arr: ckd_image(arr, e, extras, tau=20.0), x, STEP)
            assert relative_error(grad, fd) <= REL_TOL, f"case {case}"


class TestBoxLossGrad:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(239)
        for case in range(20):
            n = int(rng.integers(1, 5))
            pred = np.concatenate(
                [rng.uniform(0, 0.5, (n, 2)), rng.uniform(0.55, 1.0, (n, 2))], axis=1
            )[:, [0, 1, 2, 3]]
            tgt = np.concatenate(
                [rng.uniform(0, 0.5, (n, 2)), rng.uniform(0.55, 1.0, (n, 2))], axis=1
            )
            _, grad = box_loss(pred, tgt, return_grad=True)
            fd = finite_difference_grad(lambda arr: box_loss(arr, tgt), pred, STEP)
            assert relative_error(grad, fd) <= 1e-3, f"case {case}"
