"""Multi-scale fuzzy kNN graph, MST connectivity repair and Laplacian eigenmaps.

Everything here is a pure function of its inputs. Graphs are stored as
canonical CSR matrices (sorted indices, no explicit zeros) so that two graphs
built from the same edges compare bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .errors import InvalidParameterError

DEFAULT_SCALES = (10, 15, 30)
ZERO_EIGENVALUE_TOL = 1e-8
SCALE_TOLERANCE = 1e-5
SIGMA_MIN_FRACTION = 1e-3
BISECTION_ITERS = 100


@dataclass(frozen=True)
class DatasetMatrix:
    """Raw ``N x D`` samples with optional integer class labels."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise InvalidParameterError("dataset must be a 2-D matrix")
        n, dim = values.shape
        if n < 2 or dim < 1:
            raise InvalidParameterError(
                f"dataset needs N >= 2 rows and D >= 1 columns, got {values.shape}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            r, c = bad[0]
            raise InvalidParameterError(f"non-finite value at row {r}, column {c}")
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise InvalidParameterError("labels must have one entry per row")
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.round(labels)):
                    raise InvalidParameterError("labels must be integers")
            labels = labels.astype(np.int64)
            object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> np.ndarray:
        """Sorted distinct labels (a single ``0`` if unlabeled)."""
        return np.zeros(1, dtype=np.int64) if self.labels is None else np.unique(self.labels)

    def class_indices(self) -> list[np.ndarray]:
        """Row ids of each class in ascending label order (one group if unlabeled)."""
        if self.labels is None:
            return [np.arange(self.n_rows)]
        return [np.flatnonzero(self.labels == c) for c in self.classes]


@dataclass(frozen=True)
class LocalScale:
    rho: float
    sigma: float


@dataclass(frozen=True)
class ManifoldGraph:
    """Symmetric fuzzy adjacency ``B`` with its degrees and normalized Laplacian."""

    adjacency: sp.csr_matrix
    degrees: np.ndarray = field(repr=False)
    laplacian: sp.csr_matrix = field(repr=False)

    @classmethod
    def from_adjacency(cls, adjacency) -> "ManifoldGraph":
        """Wrap a symmetric, zero-diagonal adjacency and derive ``D`` and ``L_sym``."""
        B = _canonical(sp.csr_matrix(adjacency, dtype=np.float64))
        if B.shape[0] != B.shape[1]:
            raise InvalidParameterError("adjacency must be square")
        if (B != B.T).nnz:
            raise InvalidParameterError("adjacency must be symmetric")
        if np.any(B.diagonal() != 0):
            raise InvalidParameterError("adjacency must have a zero diagonal")
        if B.nnz and (B.data.min() < 0 or B.data.max() > 1):
            raise InvalidParameterError("adjacency entries must lie in [0, 1]")
        degrees = np.asarray(B.sum(axis=1)).ravel()
        return cls(B, degrees, normalized_laplacian(B, degrees))

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_components(self) -> int:
        return connected_components(self.adjacency, directed=False)[0]


@dataclass(frozen=True)
class SpectralEmbedding:
    """Unit-norm Laplacian eigenvectors (columns) for the smallest non-zero eigenvalues.

    ``spectrum`` keeps every eigenvalue the solver returned, including the
    discarded zero modes.
    """

    features: np.ndarray
    eigenvalues: np.ndarray
    spectrum: np.ndarray

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _canonical(mat: sp.spmatrix) -> sp.csr_matrix:
    mat = sp.csr_matrix(mat)
    mat.sum_duplicates()
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


def _as_values(data) -> np.ndarray:
    return data.values if isinstance(data, DatasetMatrix) else np.asarray(data, dtype=np.float64)


def knn_search(data, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact brute-force k nearest neighbors under the Euclidean metric.

    Returns ``(indices, distances)``, both ``N x k``, ascending by distance
    with ties broken by lower row index. A row is never its own neighbor.
    """
    x = _as_values(data)
    n = x.shape[0]
    if not 1 <= k < n:
        raise InvalidParameterError(f"k must satisfy 1 <= k < N={n}, got {k}")
    dist = cdist(x, x)
    np.fill_diagonal(dist, np.inf)
    # stable sort on distance keeps lower index first among ties
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(dist, order, axis=1)


def solve_local_scales(distances: np.ndarray, sigma_min: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized solver for (rho, sigma) on every row of a kNN distance table."""
    distances = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    n, k = distances.shape
    target = np.log2(k)
    rho = distances[:, 0].copy()
    excess = np.maximum(distances - rho[:, None], 0.0)

    def total(sigma):
        # huge ratios overflow to inf, whose exp(-inf) = 0 is the right limit
        with np.errstate(over="ignore"):
            return np.exp(-excess / sigma[:, None]).sum(axis=1)

    # the root scales with the spread of the excess distances
    scale = excess.max(axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    lo, hi = np.maximum(1e-6 * scale, np.finfo(np.float64).tiny), 1e6 * scale
    # the sum increases with sigma; no root above lo means saturation
    saturated = total(lo) >= target
    sigma = np.where(saturated, sigma_min, hi)
    active = ~saturated & (total(hi) > target)
    lo, hi = lo.copy(), hi.copy()
    for _ in range(BISECTION_ITERS):
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        f = total(mid)
        done = active & (np.abs(f - target) < SCALE_TOLERANCE)
        sigma[done] = mid[done]
        active &= ~done
        over = f > target
        hi = np.where(active & over, mid, hi)
        lo = np.where(active & ~over, mid, lo)
    sigma[active] = 0.5 * (lo[active] + hi[active])
    return rho, np.maximum(sigma, sigma_min)


def solve_local_scale(neighbor_distances: Sequence[float], sigma_min: float) -> LocalScale:
    """Find ``rho`` and ``sigma`` so the fuzzy neighborhood has cardinality log2(k).

    ``neighbor_distances`` must be sorted ascending. Degenerate rows (all
    distances equal, or k <= 2) saturate at ``sigma_min``.
    """
    d = np.asarray(neighbor_distances, dtype=np.float64)
    if d.ndim != 1 or d.size < 1:
        raise InvalidParameterError("need a non-empty 1-D distance vector")
    if np.any(np.diff(d) < 0):
        raise InvalidParameterError("neighbor distances must be sorted ascending")
    if sigma_min <= 0:
        raise InvalidParameterError("sigma_min must be positive")
    rho, sigma = solve_local_scales(d[None, :], sigma_min)
    return LocalScale(float(rho[0]), float(sigma[0]))


def directed_weights(indices: np.ndarray, distances: np.ndarray, rho, sigma) -> sp.csr_matrix:
    """Sparse directed membership ``exp(-max(0, d - rho_i) / sigma_i)``."""
    n, k = indices.shape
    rho = np.asarray(rho, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    w = np.exp(-np.maximum(distances - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), k)
    return _canonical(sp.csr_matrix((w.ravel(), (rows, indices.ravel())), shape=(n, n)))


def fuzzy_union(a, b):
    """Probabilistic t-conorm ``a + b - a*b`` for memberships in [0, 1]."""
    a_arr, b_arr = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    for v in (a_arr, b_arr):
        if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
            raise InvalidParameterError("fuzzy memberships must lie in [0, 1]")
    out = a_arr + b_arr - a_arr * b_arr
    return float(out) if out.ndim == 0 else out


def sparse_fuzzy_union(a: sp.spmatrix, b: sp.spmatrix) -> sp.csr_matrix:
    """Elementwise t-conorm of two sparse membership matrices."""
    a, b = sp.csr_matrix(a), sp.csr_matrix(b)
    return _canonical(a + b - a.multiply(b))


def normalized_laplacian(adjacency: sp.spmatrix, degrees: np.ndarray) -> sp.csr_matrix:
    """``I - D^{-1/2} B D^{-1/2}``; isolated nodes get a zero row."""
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(degrees > 0, 1.0 / np.sqrt(degrees), 0.0)
    scaled = sp.diags(inv_sqrt) @ adjacency @ sp.diags(inv_sqrt)
    eye = sp.diags((degrees > 0).astype(np.float64))
    return _canonical(eye - scaled)


def resolve_scales(scales: Optional[Iterable[int]], n: int) -> list[int]:
    """Clip requested kNN scales to ``< n`` and deduplicate."""
    scales = DEFAULT_SCALES if scales is None else tuple(scales)
    if not scales:
        raise InvalidParameterError("scale set must not be empty")
    return sorted({min(int(k), n - 1) for k in scales})


def scale_graph(x: np.ndarray, k: int) -> sp.csr_matrix:
    """Symmetrized fuzzy membership graph for a single kNN scale."""
    indices, distances = knn_search(x, k)
    sigma_min = max(SIGMA_MIN_FRACTION * distances[:, 0].mean(), 1e-12)
    rho, sigma = solve_local_scales(distances, sigma_min)
    a = directed_weights(indices, distances, rho, sigma)
    return sparse_fuzzy_union(a, a.T)


def build_multiscale_graph(data, scales: Optional[Iterable[int]] = None,
                           repair: bool = True) -> ManifoldGraph:
    """Fuse per-scale fuzzy kNN graphs with the t-conorm, then repair connectivity.

    Parameters
    ----------
    data : DatasetMatrix or array of shape (N, D)
    scales : iterable of int, optional
        kNN sizes; defaults to (10, 15, 30), clipped below N.
    repair : bool
        Insert missing minimum-spanning-tree edges so the graph is connected.
    """
    x = _as_values(data)
    ks = resolve_scales(scales, x.shape[0])
    if any(k < 1 for k in ks):
        raise InvalidParameterError("every kNN scale must be positive")
    fused = None
    for k in ks:
        a_k = scale_graph(x, k)
        fused = a_k if fused is None else sparse_fuzzy_union(fused, a_k)
    graph = ManifoldGraph.from_adjacency(fused)
    return mst_union(graph, x) if repair else graph


def minimum_spanning_tree(data) -> np.ndarray:
    """Prim's algorithm on the complete Euclidean graph; returns ``(N-1, 2)`` edges."""
    x = _as_values(data)
    n = x.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = np.sqrt(((x - x[0]) ** 2).sum(axis=1))
    parent = np.zeros(n, dtype=np.int64)
    best[0] = np.inf
    edges = np.empty((n - 1, 2), dtype=np.int64)
    for step in range(n - 1):
        j = int(np.argmin(best))
        edges[step] = (parent[j], j)
        in_tree[j] = True
        best[j] = np.inf
        dj = np.sqrt(((x - x[j]) ** 2).sum(axis=1))
        closer = ~in_tree & (dj < best)
        best[closer] = dj[closer]
        parent[closer] = j
    return edges


def mst_union(graph: ManifoldGraph, data) -> ManifoldGraph:
    """Add every Euclidean MST edge missing from ``B``.

    New edges carry the smallest positive weight already present in ``B`` so
    the repair connects components without creating strong links.
    """
    B = graph.adjacency
    edges = minimum_spanning_tree(data)
    existing = np.asarray(B[edges[:, 0], edges[:, 1]]).ravel()
    missing = edges[existing == 0]
    if len(missing) == 0:
        return graph
    weight = B.data[B.data > 0].min() if B.nnz else 1.0
    i, j = missing[:, 0], missing[:, 1]
    extra = sp.csr_matrix((np.full(2 * len(i), weight), (np.r_[i, j], np.r_[j, i])), shape=B.shape)
    return ManifoldGraph.from_adjacency(B + extra)


def spectral_embed(graph: ManifoldGraph, d: int) -> SpectralEmbedding:
    """Eigenvectors of ``L_sym`` for the ``d`` smallest non-zero eigenvalues.

    Dense symmetric solver restricted to the low end of the spectrum. Signs
    are fixed so each column's largest-magnitude entry is positive.
    """
    n = graph.n_nodes
    if not 1 <= d <= n - 1:
        raise InvalidParameterError(f"embedding dimension must be in [1, {n - 1}], got {d}")
    dense = graph.laplacian.toarray()
    want = min(n, d + graph.n_components + 2)
    while True:
        if want >= n:
            vals, vecs = scipy.linalg.eigh(dense)
        else:
            vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, want - 1])
        keep = np.flatnonzero(vals > ZERO_EIGENVALUE_TOL)
        if len(keep) >= d or want >= n:
            break
        want = n
    if len(keep) < d:
        raise InvalidParameterError(
            f"only {len(keep)} non-zero eigenpairs available, {d} requested")
    keep = keep[:d]
    feats = vecs[:, keep].copy()
    feats /= np.linalg.norm(feats, axis=0)
    pivots = np.argmax(np.abs(feats), axis=0)
    signs = np.sign(feats[pivots, np.arange(d)])
    feats *= np.where(signs == 0, 1.0, signs)
    return SpectralEmbedding(feats, vals[keep].copy(), vals.copy())


def default_embedding_dim(n: int) -> int:
    return min(32, n - 1)
