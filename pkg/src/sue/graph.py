"""k-nearest-neighbour affinity graphs with a locally adaptive RBF kernel.

For each point i, with d(i, j) the chosen metric over i's k nearest
neighbours (self excluded), set rho_i = min_j d(i, j) and sigma_i =
median_j d(i, j). The directed affinity is

    W_ij = exp(-(d(i, j) - rho_i)^2 / sigma_i^2)   for j in knn(i), else 0,

symmetrised as W <- (W + W^T) / 2. The random-walk matrix is P = D^{-1} W
and the random-walk Laplacian L = I - P.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalError
from .io import EmbeddingSet

SIGMA_FLOOR = 1e-12
_CHUNK = 512


@dataclass
class AffinityGraph:
    """Symmetric kNN affinity with the per-point kernel statistics."""

    w: sp.csr_matrix
    degrees: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray
    knn_radius: np.ndarray  # distance to each point's k-th neighbour
    k_neighbors: int
    metric: str
    points: np.ndarray  # training coordinates, kept for out-of-sample kernels

    @property
    def n(self) -> int:
        return self.w.shape[0]


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]. Raises on zero-norm inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ConfigError("cosine distance undefined for zero-norm vectors")
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ConfigError(f"{what}: zero-norm row {int(np.argmin(norms))} under cosine metric")
    return x / norms[:, None]


def pairwise_distances(queries: np.ndarray, points: np.ndarray, metric: str) -> np.ndarray:
    """Dense metric distances between query rows and point rows."""
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if metric == "cosine":
        q = _unit_rows(queries, "queries")
        p = _unit_rows(points, "points")
        return np.clip(1.0 - q @ p.T, 0.0, 2.0)
    if metric == "euclidean":
        sq = (
            np.sum(queries**2, axis=1)[:, None]
            + np.sum(points**2, axis=1)[None, :]
            - 2.0 * queries @ points.T
        )
        return np.sqrt(np.maximum(sq, 0.0))
    raise ConfigError(f"unknown metric '{metric}'")


def knn(points: np.ndarray, k: int, metric: str = "cosine"):
    """Exact brute-force k nearest neighbours, self excluded.

    Ties in the k-th distance are broken toward the lower index. Returns
    (indices, distances), each n x k with columns sorted by distance.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 2 <= k < n:
        raise ConfigError(f"need 2 <= k < n, got k={k}, n={n}")
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        d = pairwise_distances(points[start:stop], points, metric)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[start:stop] = order
        dist[start:stop] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def adaptive_kernel(dist_row: np.ndarray, rho: float, sigma: float) -> np.ndarray:
    """exp(-(d - rho)^2 / sigma^2) with sigma floored against duplicates."""
    sigma = max(sigma, SIGMA_FLOOR)
    return np.exp(-((dist_row - rho) ** 2) / sigma**2)


def build_affinity(emb, k: int | None = None, metric: str = "cosine") -> AffinityGraph:
    """Build the symmetric adaptive-kernel affinity graph.

    Accepts an EmbeddingSet or a raw n x d array. The default k of 100 is
    clamped to n - 1 on small inputs.
    """
    points = emb.data if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float64)
    n = points.shape[0]
    if k is None:
        k = min(100, n - 1)
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than n={n}")
    idx, dist = knn(points, k, metric)

    rho = dist[:, 0].copy()
    sigma = np.maximum(np.median(dist, axis=1), SIGMA_FLOOR)
    radius = dist[:, -1].copy()

    data = np.exp(-((dist - rho[:, None]) ** 2) / sigma[:, None] ** 2)
    rows = np.repeat(np.arange(n), k)
    w = sp.csr_matrix((data.ravel(), (rows, idx.ravel())), shape=(n, n))
    w = ((w + w.T) * 0.5).tocsr()
    w.setdiag(0.0)
    w.eliminate_zeros()

    degrees = np.asarray(w.sum(axis=1)).ravel()
    if np.any(degrees <= 0.0):
        raise NumericalError(f"isolated node {int(np.argmin(degrees))} after symmetrisation")
    return AffinityGraph(
        w=w,
        degrees=degrees,
        rho=rho,
        sigma=sigma,
        knn_radius=radius,
        k_neighbors=k,
        metric=metric,
        points=points,
    )


def random_walk(graph: AffinityGraph) -> sp.csr_matrix:
    """Row-stochastic P = D^{-1} W, same sparsity pattern as W."""
    if np.any(graph.degrees <= 0.0):
        raise NumericalError(f"zero degree at node {int(np.argmin(graph.degrees))}")
    inv_deg = sp.diags(1.0 / graph.degrees)
    return (inv_deg @ graph.w).tocsr()


def laplacian(graph: AffinityGraph) -> sp.csr_matrix:
    """Random-walk Laplacian L = I - P; rows sum to zero."""
    p = random_walk(graph)
    return (sp.identity(graph.n, format="csr") - p).tocsr()
