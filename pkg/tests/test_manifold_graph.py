import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.csgraph import minimum_spanning_tree as scipy_mst

from fastcoreset.errors import InvalidParameterError
from fastcoreset.manifold_graph import (
    DatasetMatrix,
    ManifoldGraph,
    build_multiscale_graph,
    directed_weights,
    fuzzy_union,
    knn_search,
    minimum_spanning_tree,
    mst_union,
    scale_graph,
    solve_local_scale,
    solve_local_scales,
    spectral_embed,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def brute_knn(x, k):
    n = len(x)
    out_i, out_d = [], []
    for i in range(n):
        pairs = sorted((float(np.linalg.norm(x[i] - x[j])), j) for j in range(n) if j != i)
        out_i.append([j for _, j in pairs[:k]])
        out_d.append([d for d, _ in pairs[:k]])
    return np.array(out_i), np.array(out_d)


def ring(n):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return ManifoldGraph.from_adjacency(a)


class TestDataset:
    def test_rejects_nan_with_coordinates(self):
        with pytest.raises(InvalidParameterError, match="row 1, column 0"):
            DatasetMatrix(np.array([[0.0], [np.nan]]))

    def test_rejects_single_row(self):
        with pytest.raises(InvalidParameterError):
            DatasetMatrix(np.zeros((1, 3)))

    def test_labels_any_integers(self):
        data = DatasetMatrix(np.zeros((3, 1)), np.array([0, 7, 7]))
        assert data.classes.tolist() == [0, 7]
        assert [r.tolist() for r in data.class_indices()] == [[0], [1, 2]]
        with pytest.raises(InvalidParameterError):
            DatasetMatrix(np.zeros((3, 1)), np.array([0, 0.5, 1]))


class TestKnn:
    def test_line_example(self):
        idx, dist = knn_search(np.array([[0.0], [1.0], [3.0]]), 2)
        assert idx[0].tolist() == [1, 2]
        assert dist[0].tolist() == [1.0, 3.0]

    def test_duplicate_points(self):
        idx, dist = knn_search(np.array([[2.0, 2.0], [2.0, 2.0]]), 1)
        assert idx.ravel().tolist() == [1, 0]
        assert dist.ravel().tolist() == [0.0, 0.0]

    def test_matches_exhaustive_oracle(self):
        x = np.random.default_rng(3).standard_normal((100, 5))
        idx, dist = knn_search(x, 10)
        o_idx, o_dist = brute_knn(x, 10)
        np.testing.assert_array_equal(idx, o_idx)
        np.testing.assert_allclose(dist, o_dist, rtol=1e-12)

    @pytest.mark.parametrize("k", [0, 5, 6])
    def test_bad_k(self, k):
        with pytest.raises(InvalidParameterError):
            knn_search(np.zeros((5, 2)) + np.arange(5)[:, None], k)


class TestLocalScale:
    def test_four_neighbors(self):
        # root of e^{-1/s} + e^{-2/s} + e^{-3/s} = 1 from scipy.optimize.brentq
        scale = solve_local_scale([1, 2, 3, 4], sigma_min=1e-3)
        assert scale.rho == 1.0
        assert scale.sigma == pytest.approx(1.641017929928487, abs=1e-4)

    def test_two_neighbors_saturate(self):
        assert solve_local_scale([1, 2], sigma_min=0.01).sigma == 0.01

    def test_equal_distances_saturate(self):
        scale = solve_local_scale([5, 5, 5, 5], sigma_min=0.02)
        assert (scale.rho, scale.sigma) == (5.0, 0.02)

    def test_unsorted_rejected(self):
        with pytest.raises(InvalidParameterError):
            solve_local_scale([2, 1, 3], 1e-3)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.0, 50.0), min_size=3, max_size=30))
    def test_residual_when_root_exists(self, raw):
        d = np.sort(np.array(raw))
        sigma_min = 1e-6
        rho, sigma = solve_local_scales(d[None, :], sigma_min)
        total = np.exp(-np.maximum(d - rho[0], 0) / sigma[0]).sum()
        at_floor = np.exp(-np.maximum(d - rho[0], 0) / sigma_min).sum()
        assert sigma[0] >= sigma_min
        if at_floor < np.log2(len(d)) and sigma[0] > sigma_min:
            assert abs(total - np.log2(len(d))) < 1e-5


class TestDirectedWeights:
    def test_nearest_neighbor_has_unit_weight(self):
        x = np.random.default_rng(0).standard_normal((20, 3))
        idx, dist = knn_search(x, 5)
        rho, sigma = solve_local_scales(dist, 1e-3)
        a = directed_weights(idx, dist, rho, sigma).toarray()
        np.testing.assert_allclose(a[np.arange(20), idx[:, 0]], 1.0)
        assert (a > 0).sum(axis=1).max() <= 5
        mask = np.zeros_like(a, dtype=bool)
        mask[np.repeat(np.arange(20), 5), idx.ravel()] = True
        assert np.all(a[~mask] == 0)

    def test_one_sigma_past_rho(self):
        idx = np.array([[1, 2], [0, 2], [0, 1]])
        dist = np.array([[1.0, 3.0], [1.0, 2.0], [2.0, 3.0]])
        rho, sigma = np.array([1.0, 1.0, 2.0]), np.array([2.0, 1.0, 1.0])
        a = directed_weights(idx, dist, rho, sigma).toarray()
        assert a[0, 2] == pytest.approx(np.exp(-1.0))
        assert a[0, 2] == pytest.approx(0.36787944117144233)


class TestFuzzyUnion:
    def test_examples(self):
        assert fuzzy_union(0.5, 0.5) == 0.75
        assert fuzzy_union(1.0, 0.37) == 1.0
        assert fuzzy_union(0.0, 0.3) == 0.3

    @pytest.mark.parametrize("a,b", [(-0.1, 0.5), (0.5, 1.2)])
    def test_out_of_range(self, a, b):
        with pytest.raises(InvalidParameterError):
            fuzzy_union(a, b)

    @given(unit, unit, unit)
    def test_algebra(self, a, b, c):
        assert fuzzy_union(a, b) == fuzzy_union(b, a)
        assert fuzzy_union(fuzzy_union(a, b), c) == pytest.approx(fuzzy_union(a, fuzzy_union(b, c)), abs=1e-12)
        assert 0.0 <= fuzzy_union(a, b) <= 1.0

    @given(unit, unit, unit)
    def test_monotone(self, a, b, c):
        lo, hi = min(b, c), max(b, c)
        assert fuzzy_union(a, lo) <= fuzzy_union(a, hi) + 1e-15


class TestMultiscaleGraph:
    def check_graph(self, g):
        B = g.adjacency
        assert (B != B.T).nnz == 0
        assert np.all(B.diagonal() == 0)
        assert B.data.min() >= 0 and B.data.max() <= 1

    def test_single_scale_is_symmetrized_plus_mst(self):
        x = np.random.default_rng(1).standard_normal((60, 2))
        g = build_multiscale_graph(x, [7])
        expected = mst_union(ManifoldGraph.from_adjacency(scale_graph(x, 7)), x)
        assert (g.adjacency != expected.adjacency).nnz == 0
        self.check_graph(g)

    def test_two_clusters_repair(self):
        rng = np.random.default_rng(2)
        x = np.vstack([rng.standard_normal((30, 2)), rng.standard_normal((30, 2)) + 100])
        before = build_multiscale_graph(x, [10], repair=False)
        after = build_multiscale_graph(x, [10])
        assert before.n_components == 2
        assert after.n_components == 1
        self.check_graph(after)

    def test_zero_eigenvalue_multiplicity_tracks_components(self):
        rng = np.random.default_rng(4)
        x = np.vstack([rng.standard_normal((25, 2)) + 50 * c for c in range(3)])
        before = build_multiscale_graph(x, [4], repair=False)
        vals = np.linalg.eigvalsh(before.laplacian.toarray())
        assert (vals <= 1e-8).sum() == before.n_components == 3
        after = mst_union(before, x)
        vals = np.linalg.eigvalsh(after.laplacian.toarray())
        assert (vals <= 1e-8).sum() == 1

    def test_empty_scales(self):
        with pytest.raises(InvalidParameterError):
            build_multiscale_graph(np.random.default_rng(0).standard_normal((10, 2)), [])

    def test_default_scales_clip_below_n(self):
        g = build_multiscale_graph(np.random.default_rng(0).standard_normal((8, 2)))
        assert g.n_nodes == 8 and g.n_components == 1


class TestMst:
    def test_collinear_insertion(self):
        x = np.array([[0.0], [1.0], [3.0]])
        # Prim on the 3x3 distance matrix: (0,1) w=1 then (1,2) w=2
        b = sp.csr_matrix(([0.4, 0.4], ([0, 1], [1, 0])), shape=(3, 3))
        g = mst_union(ManifoldGraph.from_adjacency(b), x)
        assert g.adjacency[1, 2] == g.adjacency[2, 1] == 0.4
        assert g.adjacency[0, 2] == 0
        assert g.n_components == 1

    def test_idempotent(self):
        x = np.random.default_rng(5).standard_normal((40, 3))
        once = build_multiscale_graph(x, [5])
        twice = mst_union(once, x)
        assert (once.adjacency != twice.adjacency).nnz == 0

    def test_prim_total_matches_scipy(self):
        x = np.random.default_rng(6).standard_normal((50, 4))
        edges = minimum_spanning_tree(x)
        ours = sum(np.linalg.norm(x[i] - x[j]) for i, j in edges)
        dist = np.linalg.norm(x[:, None] - x[None], axis=2)
        assert ours == pytest.approx(scipy_mst(dist).sum(), rel=1e-12)
        assert len({tuple(sorted(e)) for e in edges.tolist()}) == 49


class TestSpectralEmbed:
    def test_two_nodes(self):
        g = ManifoldGraph.from_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(g.laplacian.toarray(), [[1, -1], [-1, 1]])
        emb = spectral_embed(g, 1)
        np.testing.assert_allclose(emb.spectrum, [0.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(emb.eigenvalues, [2.0])
        np.testing.assert_allclose(emb.features[:, 0], [2 ** -0.5, -(2 ** -0.5)])

    def test_null_space_excluded(self):
        x = np.random.default_rng(7).standard_normal((80, 2))
        g = build_multiscale_graph(x, [6])
        emb = spectral_embed(g, 5)
        null = np.sqrt(g.degrees)
        null /= np.linalg.norm(null)
        assert np.abs(null @ emb.features).max() < 1e-8
        assert np.all(emb.eigenvalues > 1e-8)

    def test_ring_matches_circulant_spectrum(self):
        emb = spectral_embed(ring(8), 7)
        expected = np.sort([1 - np.cos(2 * np.pi * m / 8) for m in range(1, 8)])
        np.testing.assert_allclose(emb.eigenvalues, expected, atol=1e-10)

    def test_eigenpair_residual_and_unit_norm(self):
        x = np.random.default_rng(8).standard_normal((120, 3))
        g = build_multiscale_graph(x)
        emb = spectral_embed(g, 10)
        L = g.laplacian.toarray()
        for lam, v in zip(emb.eigenvalues, emb.features.T):
            assert np.linalg.norm(L @ v - lam * v) < 1e-6
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
            assert v[np.argmax(np.abs(v))] > 0
        assert np.all(np.diff(emb.eigenvalues) >= 0)

    def test_too_many_dimensions(self):
        with pytest.raises(InvalidParameterError):
            spectral_embed(ring(5), 5)

    def test_missing_nonzero_pairs(self):
        a = np.zeros((4, 4))
        a[0, 1] = a[1, 0] = a[2, 3] = a[3, 2] = 1.0
        with pytest.raises(InvalidParameterError):
            spectral_embed(ManifoldGraph.from_adjacency(a), 3)


def test_isolated_node_laplacian_row_is_zero():
    a = np.zeros((3, 3))
    a[0, 1] = a[1, 0] = 1.0
    g = ManifoldGraph.from_adjacency(a)
    assert np.all(g.laplacian.toarray()[2] == 0)
    assert g.n_components == 2
    assert (np.linalg.eigvalsh(g.laplacian.toarray()) <= 1e-8).sum() == 2


@pytest.mark.parametrize("seed", range(3))
def test_spectrum_bounds(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rng.integers(20, 90), rng.integers(1, 5)))
    vals = np.linalg.eigvalsh(build_multiscale_graph(x).laplacian.toarray())
    assert vals.min() >= -1e-8 and vals.max() <= 2 + 1e-8
