"""Hits@k, synthetic tasks, folds and the protocol loop."""

import numpy as np
import pytest

from hypalign.eval_harness import (
    CSV_HEADER,
    AlignmentReport,
    AlignmentTask,
    EvalConfig,
    Method,
    fold_split,
    hits_at_k,
    make_synthetic_task,
    run_protocol,
    transport_with,
)
from hypalign.gyrovector import BallParams, PointCloud, distance
from hypalign.transport_maps import w_linear_apply

from conftest import random_ball_points


def hits_oracle(U, T, matches, k):
    """Rank by a stable sort of per-pair distances computed one at a time."""
    hits = 0
    for i, j in matches:
        d = [float(distance(U[i], t)) for t in T]
        order = sorted(range(len(T)), key=lambda c: (d[c], c))
        hits += j in order[:k]
    return 100.0 * hits / len(matches)


class TestHits:
    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_matches_oracle(self, rng, k):
        U = random_ball_points(rng, 30, 3)
        T = random_ball_points(rng, 30, 3)
        matches = np.stack([np.arange(30), rng.permutation(30)], 1)
        assert hits_at_k(U, T, matches, k) == pytest.approx(hits_oracle(U, T, matches, k))

    def test_monotone_in_k(self, rng):
        U = random_ball_points(rng, 40, 2)
        T = random_ball_points(rng, 40, 2)
        m = np.stack([np.arange(40)] * 2, 1)
        vals = [hits_at_k(U, T, m, k) for k in range(1, 41)]
        assert np.all(np.diff(vals) >= 0) and vals[-1] == 100.0

    def test_perfect_transport(self, rng):
        T = random_ball_points(rng, 20, 2)
        assert hits_at_k(T, T, np.stack([np.arange(20)] * 2, 1), 1) == 100.0

    def test_ties_resolved_by_index(self):
        T = np.array([[0.5, 0.0], [-0.5, 0.0]])
        U = np.zeros((2, 2))
        assert hits_at_k(U, T, [(0, 0), (1, 1)], 1) == 50.0

    def test_k_clamped(self, rng):
        T = random_ball_points(rng, 5, 2)
        assert hits_at_k(T[::-1], T, [(0, 0)], 500) == 100.0

    def test_validation(self, rng):
        T = random_ball_points(rng, 5, 2)
        with pytest.raises(ValueError):
            hits_at_k(T, T, [(0, 0)], 0)
        with pytest.raises(ValueError):
            hits_at_k(T, T, np.zeros((0, 2)), 1)


class TestSyntheticTask:
    def test_deterministic(self):
        a, b = make_synthetic_task(3, 40, 0.05, 7), make_synthetic_task(3, 40, 0.05, 7)
        np.testing.assert_array_equal(a.src.points, b.src.points)
        np.testing.assert_array_equal(a.tgt.points, b.tgt.points)

    def test_noiseless_target_is_planted_image(self):
        task = make_synthetic_task(3, 40, 0.0, 1)
        np.testing.assert_allclose(task.tgt.points, w_linear_apply(task.planted, task.src.points), atol=1e-12)

    def test_noiseless_wlinear_recovers_all(self):
        task = make_synthetic_task(4, 100, 0.0, 2)
        out, _ = transport_with("wlinear", task, task.matches[:10], EvalConfig(), 0)
        assert hits_at_k(out, task.tgt, task.matches, 1) == 100.0

    def test_huge_noise_is_near_chance(self):
        task = make_synthetic_task(3, 200, 50.0, 3)
        assert hits_at_k(task.src.points, task.tgt, task.matches, 10) <= 20.0

    def test_other_radius(self):
        task = make_synthetic_task(2, 30, 0.05, 0, BallParams(3.0))
        assert task.tgt.ball.s == 3.0 and np.all(np.linalg.norm(task.tgt.points, axis=1) < 3.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            make_synthetic_task(5, 8)
        with pytest.raises(ValueError):
            make_synthetic_task(2, 30, -1.0)


class TestFolds:
    def test_partition(self):
        train, test = fold_split(50, 0.1, 3, 0)
        assert len(train) == 5 and len(test) == 45
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(50))

    def test_disjoint_training_slices(self):
        seen = np.concatenate([fold_split(50, 0.1, f, 0)[0] for f in range(10)])
        assert len(np.unique(seen)) == 50

    def test_task_validation(self, rng):
        X = PointCloud(random_ball_points(rng, 4, 2))
        with pytest.raises(ValueError):
            AlignmentTask(X, X, [(0, 9)])
        with pytest.raises(ValueError):
            AlignmentTask(X, X, [(0, 0)], train_fraction=1.0)

    def test_swapped(self, rng):
        X = PointCloud(random_ball_points(rng, 4, 2))
        Y = PointCloud(random_ball_points(rng, 4, 2))
        t = AlignmentTask(X, Y, [(0, 2), (1, 3)]).swapped()
        assert t.src is Y and t.matches.tolist() == [[2, 0], [3, 1]]


class TestProtocol:
    def test_single_fold_report(self):
        task = make_synthetic_task(3, 40, 0.02, 0)
        r = run_protocol(task, Method.WLINEAR, folds=1)
        assert r.folds == 1 and r.hits_src_tgt >= 90.0
        assert r.to_text().startswith("method=wlinear\n")
        assert CSV_HEADER.count(",") == r.csv_rows()[0].count(",")

    def test_identity_baseline(self):
        task = make_synthetic_task(3, 40, 0.02, 0)
        r = run_protocol(task, "identity", folds=1)
        _, test = fold_split(40, 0.1, 0, 0)
        expected = hits_at_k(task.src.points, task.tgt, task.matches[test], 10)
        assert r.hits_src_tgt == pytest.approx(expected)

    @pytest.mark.parametrize("method", ["otda", "euclid_otda", "euclid_linear"])
    def test_methods_run(self, method):
        task = make_synthetic_task(3, 40, 0.02, 0)
        out, _ = transport_with(method, task, task.matches[:4], EvalConfig(), 0)
        assert out.shape == task.src.points.shape
        assert np.all(np.linalg.norm(out, axis=1) < 1.0)

    def test_rejects_zero_folds(self):
        with pytest.raises(ValueError):
            run_protocol(make_synthetic_task(2, 20, 0.0, 0), "identity", folds=0)
