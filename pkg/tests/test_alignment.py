import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fastcoreset.alignment import (
    Assignment,
    RffMap,
    cost_matrix,
    dpp_loss,
    dpp_loss_and_grad,
    graph_loss,
    hungarian,
    laplacian_submatrix,
    match_loss,
    median_heuristic,
    rff_features,
)
from fastcoreset.errors import InvalidParameterError
from fastcoreset.manifold_graph import build_multiscale_graph, spectral_embed


def exhaustive_min(cost):
    m, n = cost.shape
    return min(sum(cost[i, p[i]] for i in range(m)) for p in itertools.permutations(range(n), m))


def finite_difference(f, y, h=1e-6):
    g = np.zeros_like(y)
    for idx in np.ndindex(*y.shape):
        up, down = y.copy(), y.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (f(up) - f(down)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestRff:
    def test_zero_input_zero_offsets(self):
        rff = RffMap.create(3, 16, 1.0, seed=0)
        rff = RffMap(rff.directions, np.zeros(16), 1.0, 0)
        np.testing.assert_allclose(rff_features(np.zeros((1, 3)), rff), np.sqrt(2 / 16))

    def test_deterministic(self):
        a, b = RffMap.create(4, 32, 2.0, seed=9), RffMap.create(4, 32, 2.0, seed=9)
        assert np.array_equal(a.directions, b.directions) and np.array_equal(a.offsets, b.offsets)
        assert np.all((a.offsets >= 0) & (a.offsets < 2 * np.pi))

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidParameterError):
            rff_features(np.zeros((2, 3)), RffMap.create(2))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-100, 100)))
    def test_self_inner_product_bounded(self, y):
        psi = rff_features(y, RffMap.create(3, 64, 1.0, seed=1))
        assert np.all((psi ** 2).sum(axis=1) <= 2 + 1e-12)

    def test_gaussian_kernel_approximation(self):
        rng = np.random.default_rng(2)
        rff = RffMap.create(3, 2048, 1.0, seed=3)
        for _ in range(20):
            y, z = rng.standard_normal((2, 3))
            y, z = y / np.linalg.norm(y), z / np.linalg.norm(z)
            approx = rff_features(np.vstack([y, z]), rff)
            assert abs(approx[0] @ approx[1] - np.exp(-np.sum((y - z) ** 2) / 2)) < 0.05

    def test_median_heuristic(self):
        pts = np.array([[0.0], [1.0], [3.0]])
        assert median_heuristic(pts) == 2.0
        assert median_heuristic(np.zeros((4, 2))) == 1.0


class TestDpp:
    def test_orthonormal_rows(self):
        assert dpp_loss(np.eye(4)[:3], 1e-12) == pytest.approx(0.0, abs=1e-10)

    def test_scalar(self):
        assert dpp_loss(np.array([[0.6, 0.8]]), 1e-12) == pytest.approx(0.0, abs=1e-10)

    def test_duplicate_rows_cost_more(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        b = np.array([[1.0, 0.0], [0.0, 1.0]])
        delta = 1e-3
        # 2x2 determinants: (1+d)^2 - 1 for the duplicate, (1+d)^2 for the orthogonal pair
        assert dpp_loss(a, delta) == pytest.approx(-np.log((1 + delta) ** 2 - 1))
        assert dpp_loss(b, delta) == pytest.approx(-np.log((1 + delta) ** 2))
        assert dpp_loss(a, delta) > dpp_loss(b, delta)

    def test_perturbing_duplicate_lowers_loss(self):
        rff = RffMap.create(2, 256, 1.0, seed=4)
        y = np.array([[0.2, 0.1], [0.2, 0.1]])
        moved = y.copy()
        moved[1] += [0.0, 0.3]
        assert dpp_loss(rff_features(moved, rff)) < dpp_loss(rff_features(y, rff))

    def test_bad_delta(self):
        with pytest.raises(InvalidParameterError):
            dpp_loss(np.eye(2), 0.0)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            m, d = rng.integers(1, 9), rng.integers(1, 5)
            rff = RffMap.create(d, 128, 1.5, seed=int(rng.integers(1000)))
            y = rng.standard_normal((m, d))
            _, g = dpp_loss_and_grad(y, rff)
            fd = finite_difference(lambda z: dpp_loss(rff_features(z, rff)), y)
            assert rel_err(g, fd) < 1e-5


class TestCostMatrix:
    def test_examples(self):
        c = cost_matrix([[0.0, 0.0]], [[0.0, 0.0], [2.0, 0.0]], [1.0, 3.0], eps=1e-12)
        assert c[0, 0] == 0.0
        assert c[0, 1] == pytest.approx(4 / 3)

    def test_degree_scaling(self):
        y, v = np.array([[0.0]]), np.array([[1.0], [1.2]])
        assert cost_matrix(y, v, [1.0, 1.0]).argmin() == 0
        assert cost_matrix(y, v, [1.0, 2.0]).argmin() == 1

    def test_bad_eps(self):
        with pytest.raises(InvalidParameterError):
            cost_matrix([[0.0]], [[0.0]], [1.0], eps=0)


class TestHungarian:
    def test_diagonal(self):
        a = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert a.pi.tolist() == [0, 1] and a.cost == 2.0

    def test_rectangular(self):
        a = hungarian(np.array([[1.0, 0.0, 5.0], [2.0, 3.0, 0.0]]))
        assert a.pi.tolist() == [1, 2] and a.cost == 0.0

    def test_all_equal_is_identity(self):
        assert hungarian(np.ones((4, 6))).pi.tolist() == [0, 1, 2, 3]

    def test_too_many_rows(self):
        with pytest.raises(InvalidParameterError):
            hungarian(np.ones((3, 2)))

    def test_non_finite(self):
        with pytest.raises(InvalidParameterError):
            hungarian(np.array([[np.inf, 1.0]]))

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(1, n + 1))
            cost = rng.random((m, n))
            a = hungarian(cost)
            assert a.cost == pytest.approx(exhaustive_min(cost), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6).flatmap(lambda m: st.tuples(
        st.just(m), st.integers(m, 8),
        st.lists(st.integers(0, 5), min_size=48, max_size=48))))
    def test_injective_with_integer_ties(self, args):
        m, n, vals = args
        cost = np.array(vals[: m * n], dtype=float).reshape(m, n)
        a = hungarian(cost)
        assert len(set(a.pi.tolist())) == m
        assert a.cost == exhaustive_min(cost)


class TestMatchLoss:
    def test_zero_at_anchors(self):
        v = np.arange(6.0).reshape(3, 2)
        loss, g = match_loss(v[[2, 0]], v, Assignment(np.array([2, 0]), 0.0))
        assert loss == 0.0 and np.all(g == 0)

    def test_distance_two(self):
        loss, _ = match_loss([[2.0, 0.0]], np.zeros((1, 2)), Assignment(np.array([0]), 0.0))
        assert loss == 4.0

    def test_gradient(self):
        rng = np.random.default_rng(7)
        v = rng.standard_normal((10, 3))
        a = Assignment(np.array([4, 1, 7]), 0.0)
        y = rng.standard_normal((3, 3))
        fd = finite_difference(lambda z: match_loss(z, v, a)[0], y)
        assert rel_err(match_loss(y, v, a)[1], fd) < 1e-6


class TestGraphLoss:
    def test_zero(self):
        assert graph_loss(np.zeros((3, 2)), np.eye(3))[0] == 0.0

    def test_rayleigh_quotient(self):
        x = np.random.default_rng(8).standard_normal((40, 2))
        g = build_multiscale_graph(x, [5])
        emb = spectral_embed(g, 3)
        sub = laplacian_submatrix(g.laplacian, Assignment(np.arange(40), 0.0))
        for lam, vec in zip(emb.eigenvalues, emb.features.T):
            assert graph_loss(vec[:, None], sub)[0] == pytest.approx(lam, abs=1e-10)

    def test_double_loop_oracle_and_gradient(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((30, 2))
        g = build_multiscale_graph(x, [5])
        pi = rng.choice(30, 6, replace=False)
        sub = laplacian_submatrix(g.laplacian, Assignment(pi, 0.0))
        np.testing.assert_allclose(sub, g.laplacian.toarray()[np.ix_(pi, pi)])
        y = rng.standard_normal((6, 3))
        oracle = sum(sub[i, j] * (y[i] @ y[j]) for i in range(6) for j in range(6))
        value, grad = graph_loss(y, sub)
        assert value == pytest.approx(oracle, rel=1e-12)
        assert value >= -1e-10
        assert rel_err(grad, finite_difference(lambda z: graph_loss(z, sub)[0], y)) < 1e-6
