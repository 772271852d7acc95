"""Synthetic datasets used by the evaluation harness and the test suite."""

import numpy as np

from .manifold_graph import DatasetMatrix

GMM_MEANS = np.array([[0.0, 0.0], [5.0, 1.0], [1.5, 4.5]])
GMM_COVS = np.array([
    [[1.0, 0.3], [0.3, 0.6]],
    [[0.5, -0.2], [-0.2, 1.2]],
    [[0.8, 0.0], [0.0, 0.3]],
])
GMM_WEIGHTS = np.array([0.5, 0.3, 0.2])


def gmm_2d(n: int = 3000, seed: int = 0, labeled: bool = False) -> DatasetMatrix:
    """Three-component 2-D Gaussian mixture with unequal weights and shapes."""
    rng = np.random.default_rng(seed)
    comp = rng.choice(3, size=n, p=GMM_WEIGHTS)
    x = np.empty((n, 2))
    for c in range(3):
        rows = comp == c
        x[rows] = rng.multivariate_normal(GMM_MEANS[c], GMM_COVS[c], size=rows.sum())
    return DatasetMatrix(x, comp if labeled else None)


def lognormal_1d(n: int = 2000, seed: int = 0, sigma: float = 0.6) -> DatasetMatrix:
    """Right-skewed 1-D benchmark."""
    rng = np.random.default_rng(seed)
    return DatasetMatrix(rng.lognormal(0.0, sigma, size=(n, 1)))


def two_blobs(n: int = 400, seed: int = 0, gap: float = 20.0) -> DatasetMatrix:
    """Two well-separated isotropic 2-D blobs of equal size."""
    rng = np.random.default_rng(seed)
    half = n // 2
    x = np.vstack([rng.standard_normal((half, 2)), rng.standard_normal((n - half, 2)) + [gap, 0.0]])
    return DatasetMatrix(x)


def blob_membership(values: np.ndarray, gap: float = 20.0) -> np.ndarray:
    return (values[:, 0] > gap / 2).astype(int)
