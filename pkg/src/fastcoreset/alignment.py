"""Diversity and manifold-anchoring terms for the continuous coreset.

All loss functions return ``(value, gradient)`` with the gradient taken with
respect to the ``M x d`` coreset; the assignment is held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist

from .errors import InvalidParameterError, NumericalError


@dataclass(frozen=True)
class RffMap:
    """Random Fourier feature map for a Gaussian kernel of the given bandwidth."""

    directions: np.ndarray
    offsets: np.ndarray
    bandwidth: float
    seed: int

    @classmethod
    def create(cls, dim: int, n_features: int = 512, bandwidth: float = 1.0, seed: int = 0) -> "RffMap":
        if bandwidth <= 0 or n_features < 1:
            raise InvalidParameterError("RFF needs bandwidth > 0 and at least one feature")
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((n_features, dim)) / bandwidth
        offsets = rng.uniform(0.0, 2 * np.pi, n_features)
        return cls(directions, offsets, float(bandwidth), seed)

    @property
    def n_features(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]


@dataclass(frozen=True)
class Assignment:
    pi: np.ndarray
    cost: float


def median_heuristic(points: np.ndarray, max_rows: int = 2000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance, on a seeded row subsample if large."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] > max_rows:
        rows = np.random.default_rng(seed).choice(pts.shape[0], max_rows, replace=False)
        pts = pts[np.sort(rows)]
    med = float(np.median(pdist(pts)))
    return med if med > 0 else 1.0


def rff_features(coreset: np.ndarray, rff: RffMap) -> np.ndarray:
    y = np.asarray(coreset, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != rff.dim:
        raise InvalidParameterError(f"coreset has dimension {y.shape[-1]}, RFF map expects {rff.dim}")
    return np.sqrt(2.0 / rff.n_features) * np.cos(y @ rff.directions.T + rff.offsets)


def _gram_factor(features: np.ndarray, delta: float):
    if delta <= 0:
        raise InvalidParameterError("delta must be positive")
    K = features @ features.T + delta * np.eye(features.shape[0])
    try:
        return scipy.linalg.cho_factor(K, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"Cholesky of the DPP kernel failed (M={features.shape[0]}, delta={delta})") from exc


def dpp_loss(features: np.ndarray, delta: float = 1e-3) -> float:
    """``-log det(Psi Psi^T + delta I)``."""
    c, _ = _gram_factor(np.asarray(features, dtype=np.float64), delta)
    return float(-2.0 * np.log(np.diag(c)).sum())


def dpp_loss_and_grad(coreset: np.ndarray, rff: RffMap, delta: float = 1e-3):
    """DPP diversity loss of the coreset's RFF features and its coreset gradient."""
    y = np.asarray(coreset, dtype=np.float64)
    arg = y @ rff.directions.T + rff.offsets
    amp = np.sqrt(2.0 / rff.n_features)
    psi = amp * np.cos(arg)
    factor = _gram_factor(psi, delta)
    loss = float(-2.0 * np.log(np.diag(factor[0])).sum())
    k_inv = scipy.linalg.cho_solve(factor, np.eye(psi.shape[0]))
    d_psi = -2.0 * (k_inv @ psi)
    grad = (d_psi * (-amp * np.sin(arg))) @ rff.directions
    return loss, grad


def cost_matrix(coreset: np.ndarray, anchors: np.ndarray, degrees: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Graph-aware cost ``|y_i - v_j|^2 / (deg_j + eps)``."""
    if eps <= 0:
        raise InvalidParameterError("eps must be positive")
    y = np.asarray(coreset, dtype=np.float64)
    v = np.asarray(anchors, dtype=np.float64)
    sq = (y ** 2).sum(1)[:, None] + (v ** 2).sum(1)[None, :] - 2.0 * y @ v.T
    return np.maximum(sq, 0.0) / (np.asarray(degrees, dtype=np.float64) + eps)[None, :]


def hungarian(cost: np.ndarray) -> Assignment:
    """Exact minimum-cost injective assignment of rows to columns (M <= N)."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise InvalidParameterError("cost must be a matrix")
    m, n = c.shape
    if m > n:
        raise InvalidParameterError(f"cannot assign {m} rows injectively into {n} columns")
    if not np.all(np.isfinite(c)):
        raise InvalidParameterError("costs must be finite")
    rows, cols = linear_sum_assignment(c)
    pi = np.empty(m, dtype=np.int64)
    pi[rows] = cols
    return Assignment(pi, float(c[np.arange(m), pi].sum()))


def match_loss(coreset: np.ndarray, anchors: np.ndarray, assignment: Assignment):
    """Mean squared distance from each proxy to its assigned anchor."""
    y = np.asarray(coreset, dtype=np.float64)
    diff = y - anchors[assignment.pi]
    m = y.shape[0]
    return float((diff ** 2).sum() / m), (2.0 / m) * diff


def graph_loss(coreset: np.ndarray, laplacian_sub: np.ndarray):
    """Laplacian regularizer ``Tr(Y^T L_sub Y)`` for a symmetric ``L_sub``."""
    y = np.asarray(coreset, dtype=np.float64)
    ly = laplacian_sub @ y
    return float(np.einsum("ij,ij->", y, ly)), 2.0 * ly


def laplacian_submatrix(laplacian, assignment: Assignment) -> np.ndarray:
    """Dense ``M x M`` principal submatrix of ``L_sym`` indexed by the assignment."""
    pi = assignment.pi
    return np.asarray(laplacian[pi][:, pi].toarray())
