"""Cost matrices, supervision masking, exact and entropic OT solvers."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from hypalign.gyrovector import BallParams, PointCloud, distance
from hypalign.ot_solvers import (
    Coupling,
    CostKind,
    SinkhornConfig,
    apply_supervision,
    build_cost_matrix,
    cost_derivative,
    cost_from_distance,
    entropic_value,
    exact_ot,
    read_coupling_csv,
    read_coupling_triplets,
    sinkhorn,
    sinkhorn_divergence,
    supervision_sentinel,
    write_coupling_csv,
    write_coupling_triplets,
)

from conftest import random_ball_points


def brute_force_assignment(C):
    """Minimum average cost over all permutations."""
    n = C.shape[0]
    return min(C[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


def lp_transport_cost(a, b, C):
    """Optimal transport cost from scipy's linear-programming solver."""
    n, m = C.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    return res.fun


def uniform(n):
    return np.full(n, 1.0 / n)


class TestCostMatrix:
    def test_single_point(self):
        cloud = PointCloud(np.array([[0.2, -0.1]]))
        np.testing.assert_array_equal(build_cost_matrix(cloud, cloud, "sq_hyperbolic"), [[0.0]])
        np.testing.assert_array_equal(build_cost_matrix(cloud, cloud, "neg_cosh"), [[-1.0]])

    @pytest.mark.parametrize("kind", list(CostKind))
    def test_elementwise(self, rng, kind):
        ball = BallParams(1.5)
        X = random_ball_points(rng, 3, 2, 1.5)
        Y = random_ball_points(rng, 3, 2, 1.5)
        C = build_cost_matrix(PointCloud(X, ball=ball), PointCloud(Y, ball=ball), kind)
        for i in range(3):
            for j in range(3):
                if kind is CostKind.SQ_EUCLIDEAN:
                    expected = np.sum((X[i] - Y[j]) ** 2)
                else:
                    d = float(distance(X[i], Y[j], ball))
                    expected = {
                        CostKind.SQ_HYPERBOLIC: d**2,
                        CostKind.NEG_COSH: -np.cosh(d),
                        CostKind.NEG_LOG_ONE_PLUS_COSH: -np.log(1 + np.cosh(d)),
                        CostKind.LOG_COSH: np.log(np.cosh(d)),
                        CostKind.NEG_LOG_COSH: -np.log(np.cosh(d)),
                    }[kind]
                np.testing.assert_allclose(C[i, j], expected, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("kind", sorted(set(CostKind) - {CostKind.SQ_EUCLIDEAN}))
    def test_derivative(self, kind):
        d = np.linspace(0.1, 3.0, 7)
        h = 1e-6
        fd = (cost_from_distance(d + h, kind) - cost_from_distance(d - h, kind)) / (2 * h)
        np.testing.assert_allclose(cost_derivative(d, kind), fd, rtol=1e-6)

    def test_ball_mismatch(self):
        a = PointCloud(np.zeros((1, 2)), ball=BallParams(1.0))
        b = PointCloud(np.zeros((1, 2)), ball=BallParams(2.0))
        with pytest.raises(ValueError):
            build_cost_matrix(a, b)
        build_cost_matrix(a, b, "sq_euclidean")

    def test_euclidean_accepts_any_vectors(self):
        C = build_cost_matrix(np.array([[5.0, 0.0]]), np.array([[0.0, 0.0]]), "sq_euclidean")
        np.testing.assert_array_equal(C, [[25.0]])


class TestSupervision:
    def test_empty_pairs(self, rng):
        C = rng.random((3, 3))
        np.testing.assert_array_equal(apply_supervision(C, []), C)

    def test_single_pair(self, rng):
        C = rng.random((3, 4))
        S = apply_supervision(C, [(0, 0)])
        assert S[0, 0] == 0.0
        assert np.all(S[0, 1:] == S.sentinel)
        assert np.all(S[1:, 0] == S.sentinel)
        np.testing.assert_array_equal(S[1:, 1:], C[1:, 1:])
        assert S.sentinel == supervision_sentinel(C)

    def test_out_of_range(self, rng):
        with pytest.raises(IndexError):
            apply_supervision(rng.random((3, 3)), [(3, 0)])

    def test_full_diagonal_concentrates(self, rng):
        C = rng.random((6, 6))
        S = apply_supervision(C, [(i, i) for i in range(6)])
        P = sinkhorn(uniform(6), uniform(6), S).plan
        assert P.sum() - np.trace(P) <= 1e-6

    def test_reapplying_keeps_scale(self, rng):
        C = rng.random((4, 4))
        S1 = apply_supervision(C, [(0, 0)])
        S2 = apply_supervision(S1, [(1, 1)])
        # old masks are rewritten with the new sentinel, which never grows
        assert S2.sentinel <= S1.sentinel
        assert S2[0, 2] == S2.sentinel
        assert S2[0, 0] == 0.0 and S2[1, 1] == 0.0


class TestExactOt:
    def test_single(self):
        np.testing.assert_array_equal(exact_ot([1.0], [1.0], [[3.0]]).plan, [[1.0]])

    def test_dominant_diagonal(self, rng):
        C = rng.random((4, 4)) + 10.0
        C[np.arange(4), np.arange(4)] = 0.0
        np.testing.assert_allclose(exact_ot(uniform(4), uniform(4), C).plan, np.eye(4) / 4)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_permutation_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        for n in (2, 3, 4, 5, 6):
            C = rng.random((n, n))
            M = exact_ot(uniform(n), uniform(n), C)
            assert M.cost(C) == pytest.approx(brute_force_assignment(C), abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_general_marginals_match_linprog(self, seed):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(2, 8, size=2)
        a = rng.random(n) + 0.1
        b = rng.random(m) + 0.1
        a /= a.sum()
        b /= b.sum()
        C = rng.random((n, m))
        M = exact_ot(a, b, C)
        assert M.marginal_error() <= 1e-12
        assert np.all(M.plan >= 0)
        assert M.cost(C) == pytest.approx(lp_transport_cost(a, b, C), abs=1e-12)

    def test_too_large(self, rng):
        with pytest.raises(ValueError, match="too large"):
            exact_ot(uniform(9), uniform(9), rng.random((9, 9)))


class TestSinkhorn:
    def test_single(self):
        np.testing.assert_allclose(sinkhorn([1.0], [1.0], [[2.0]]).plan, [[1.0]])

    def test_large_epsilon_gives_product(self, rng):
        C = rng.random((5, 4))
        a = uniform(5)
        b = uniform(4)
        P = sinkhorn(a, b, C, SinkhornConfig(epsilon=1e3 * np.abs(C).max() * 1e3)).plan
        np.testing.assert_allclose(P, np.outer(a, b), atol=1e-6)

    @pytest.mark.parametrize("method", ["newton", "sweeps"])
    def test_methods_agree(self, rng, method):
        C = rng.random((7, 5))
        ref = sinkhorn(uniform(7), uniform(5), C, SinkhornConfig(0.1, 5000, 1e-12, method="sweeps")).plan
        P = sinkhorn(uniform(7), uniform(5), C, SinkhornConfig(0.1, 5000, 1e-12, method=method)).plan
        np.testing.assert_allclose(P, ref, atol=1e-10)

    def test_scaling_form_agrees(self, rng):
        C = rng.random((6, 6))
        cfg = SinkhornConfig(0.5, 5000, 1e-12, log_domain=False)
        P = sinkhorn(uniform(6), uniform(6), C, cfg).plan
        Q = sinkhorn(uniform(6), uniform(6), C, SinkhornConfig(0.5, 100, 1e-12)).plan
        np.testing.assert_allclose(P, Q, atol=1e-10)

    def test_scaling_form_underflow_raises(self, rng):
        C = rng.random((6, 6)) * 100
        with pytest.raises(FloatingPointError):
            sinkhorn(uniform(6), uniform(6), C, SinkhornConfig(1e-3, 100, 1e-9, log_domain=False))

    def test_is_optimal_for_entropic_objective(self, rng):
        """Perturbing the plan inside the polytope never lowers the objective."""
        C = rng.random((4, 4))
        eps = 0.2
        P = sinkhorn(uniform(4), uniform(4), C, SinkhornConfig(eps, 200, 1e-13)).plan
        base = entropic_value(P, C, eps)
        for _ in range(20):
            i, j = rng.choice(4, 2, replace=False)
            k, l = rng.choice(4, 2, replace=False)
            D = np.zeros((4, 4))
            D[i, k] += 1
            D[j, l] += 1
            D[i, l] -= 1
            D[j, k] -= 1
            assert entropic_value(P + 1e-3 * D, C, eps) >= base - 1e-12

    def test_non_finite_cost(self):
        with pytest.raises(ValueError):
            sinkhorn(uniform(2), uniform(2), np.array([[0.0, np.inf], [1.0, 0.0]]))

    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            SinkhornConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            SinkhornConfig(epsilon=-1.0)

    def test_cost_monotone_in_epsilon(self, rng):
        X = random_ball_points(rng, 8, 2)
        Y = random_ball_points(rng, 8, 2)
        C = build_cost_matrix(X, Y)
        costs = [
            sinkhorn(uniform(8), uniform(8), C, SinkhornConfig(eps, 200, 1e-10)).cost(C)
            for eps in (1.0, 0.1, 0.01, 0.001)
        ]
        assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))
        assert costs[-1] >= exact_ot(uniform(8), uniform(8), C).cost(C) - 1e-12

    def test_deterministic(self, rng):
        C = rng.random((10, 10))
        P1 = sinkhorn(uniform(10), uniform(10), C).plan
        P2 = sinkhorn(uniform(10), uniform(10), C).plan
        np.testing.assert_array_equal(P1, P2)

    def test_warm_start_reaches_same_plan(self, rng):
        C = rng.random((12, 12))
        cold = sinkhorn(uniform(12), uniform(12), C)
        warm = sinkhorn(uniform(12), uniform(12), C + 1e-3 * rng.random((12, 12)), warm_start=cold.row_potential)
        assert warm.marginal_error() <= 1e-7
        assert warm.n_iter < cold.n_iter

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 30), st.integers(0, 10_000))
    def test_feasible(self, n, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.random(n) + 0.05
        b = rng.random(m) + 0.05
        a /= a.sum()
        b /= b.sum()
        X = random_ball_points(rng, n, 3)
        Y = random_ball_points(rng, m, 3)
        M = sinkhorn(a, b, build_cost_matrix(X, Y))
        assert M.converged
        assert M.marginal_error() <= 1e-7
        assert np.all(M.plan >= 0)


class TestSinkhornDivergence:
    def test_self_is_zero(self, rng):
        cloud = PointCloud(random_ball_points(rng, 15, 3))
        assert abs(sinkhorn_divergence(cloud, cloud)) <= 1e-10

    def test_symmetric(self, rng):
        a = PointCloud(random_ball_points(rng, 10, 2))
        b = PointCloud(random_ball_points(rng, 12, 2))
        cfg = SinkhornConfig(rel_tol=1e-13, max_iters=200)
        assert sinkhorn_divergence(a, b, cfg=cfg) == pytest.approx(sinkhorn_divergence(b, a, cfg=cfg), abs=1e-9)

    def test_farther_clusters_score_higher(self, rng):
        base = random_ball_points(rng, 10, 2, max_frac=0.1)
        near = PointCloud(base + np.array([0.1, 0.0]))
        far = PointCloud(base + np.array([0.6, 0.0]))
        ref = PointCloud(base)
        assert sinkhorn_divergence(ref, far) > sinkhorn_divergence(ref, near) > 0


class TestCouplingExport:
    def test_csv_round_trip(self, rng, tmp_path):
        P = rng.random((3, 4))
        path = tmp_path / "plan.csv"
        write_coupling_csv(path, Coupling(P, P.sum(1), P.sum(0)))
        assert path.read_text().splitlines()[0] == "3,4"
        np.testing.assert_array_equal(read_coupling_csv(path), P)

    def test_triplets_round_trip(self, rng, tmp_path):
        P = rng.random((3, 4))
        P[P < 0.5] = 0.0
        path = tmp_path / "plan.txt"
        write_coupling_triplets(path, P)
        np.testing.assert_array_equal(read_coupling_triplets(path, P.shape), P)
