"""Spectral embedding of the random-walk matrix plus out-of-sample extension.

The k leading non-trivial eigenpairs of P = D^{-1} W are computed through
the similar symmetric matrix A = D^{-1/2} W D^{-1/2}: if A u = lam u then
v = D^{-1/2} u satisfies P v = lam v. Dense instances use a direct
symmetric solver; larger ones use restarted Lanczos (ARPACK) with a fixed
start vector so results are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NumericalError
from .graph import AffinityGraph, adaptive_kernel, pairwise_distances
from .io import EmbeddingSet, content_hash

DENSE_LIMIT = 2048
_SELF_MATCH = 1e-12  # on directly computed coordinate distance


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every column positive."""
    lead = np.abs(vectors).argmax(axis=0)
    flip = vectors[lead, np.arange(vectors.shape[1])] < 0
    vectors[:, flip] *= -1.0
    return vectors


@dataclass
class SpectralModel:
    """Leading non-trivial eigenpairs of P and everything extension needs."""

    eigenvalues: np.ndarray  # (k,), descending, trivial lam=1 excluded
    eigenvectors: np.ndarray  # (n, k), unit-norm sign-fixed columns
    points: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray
    knn_radius: np.ndarray
    k_neighbors: int
    metric: str
    train_hash: str

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[0]

    def embed_train(self) -> np.ndarray:
        """Training embedding: row i is (v_2(i), ..., v_{k+1}(i))."""
        return self.eigenvectors.copy()

    def extend(self, new_points) -> np.ndarray:
        """Nystrom extension of the embedding to unseen points.

        Each new point gets kernel weights built with the training
        construction (adaptive forward kernel from its own neighbour
        statistics, averaged with the reverse kernels of training points
        whose neighbourhood radius covers it). Feeding a training point
        back reproduces its row of P and hence its training embedding.
        """
        pts = new_points.data if isinstance(new_points, EmbeddingSet) else np.asarray(new_points, dtype=np.float64)
        pts = pts.reshape(-1, self.points.shape[1]) if pts.size else pts.reshape(0, self.points.shape[1])
        small = np.abs(self.eigenvalues) < 1e-8
        if small.any():
            raise NumericalError(
                f"extension ill-conditioned: |lambda_{int(np.argmax(small)) + 2}| < 1e-8"
            )
        t = pts.shape[0]
        out = np.empty((t, self.k), dtype=np.float64)
        if t == 0:
            return out
        k = self.k_neighbors
        chunk = max(1, 2_000_000 // max(self.n, 1))
        for start in range(0, t, chunk):
            stop = min(start + chunk, t)
            dist = pairwise_distances(pts[start:stop], self.points, self.metric)
            # Reverse kernels: training points whose kNN radius reaches the
            # query. The radius test tolerates last-bit noise so a boundary
            # (k-th) neighbour keeps its training-time membership.
            radius = self.knn_radius[None, :] * (1.0 + 1e-9) + 1e-15
            w_rev = np.exp(-((dist - self.rho[None, :]) ** 2) / self.sigma[None, :] ** 2)
            w_rev *= dist <= radius
            for r in range(stop - start):
                row = dist[r]
                order = np.argsort(row, kind="stable")
                # A query within kernel resolution of a training point adopts
                # that point's neighbourhood, i.e. the coinciding point is
                # dropped exactly like the self-exclusion during training.
                # Exact matches are re-checked on raw coordinates because the
                # expanded-square distance leaves ~1e-7 noise at zero.
                nearest = order[0]
                if (
                    row[nearest] < 1e-4 * self.sigma[nearest]
                    or np.linalg.norm(pts[start + r] - self.points[nearest]) < _SELF_MATCH
                ):
                    w_rev[r, nearest] = 0.0
                    order = order[1:]
                fwd = order[:k]
                d_fwd = row[fwd]
                weights = 0.5 * w_rev[r]
                weights[fwd] += 0.5 * adaptive_kernel(d_fwd, d_fwd[0], np.median(d_fwd))
                total = weights.sum()
                if total <= 0.0:
                    raise NumericalError("extension produced an all-zero kernel row")
                out[start + r] = (weights / total) @ self.eigenvectors
        return out / self.eigenvalues[None, :]

    def save(self, path) -> None:
        np.savez(
            path,
            eigenvalues=self.eigenvalues,
            eigenvectors=self.eigenvectors,
            points=self.points,
            rho=self.rho,
            sigma=self.sigma,
            knn_radius=self.knn_radius,
            meta=np.frombuffer(
                json.dumps(
                    {
                        "k_neighbors": self.k_neighbors,
                        "metric": self.metric,
                        "train_hash": self.train_hash,
                    }
                ).encode(),
                dtype=np.uint8,
            ),
        )

    @classmethod
    def load(cls, path) -> "SpectralModel":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            model = cls(
                eigenvalues=z["eigenvalues"],
                eigenvectors=z["eigenvectors"],
                points=z["points"],
                rho=z["rho"],
                sigma=z["sigma"],
                knn_radius=z["knn_radius"],
                k_neighbors=int(meta["k_neighbors"]),
                metric=meta["metric"],
                train_hash=meta["train_hash"],
            )
        if content_hash(model.points) != model.train_hash:
            raise NumericalError("checkpoint training-set hash mismatch")
        return model


def fit_spectral(graph: AffinityGraph, k: int, solver: str = "auto") -> SpectralModel:
    """Compute the k leading non-trivial eigenpairs of the graph's P."""
    n = graph.n
    if k >= n - 1:
        raise ConfigError(f"k={k} must be below n-1={n - 1}")
    if solver not in ("auto", "dense", "iterative"):
        raise ConfigError(f"unknown solver '{solver}'")

    inv_sqrt = 1.0 / np.sqrt(graph.degrees)
    a = sp.diags(inv_sqrt) @ graph.w @ sp.diags(inv_sqrt)

    use_dense = solver == "dense" or (solver == "auto" and n <= DENSE_LIMIT)
    if use_dense:
        vals, vecs = np.linalg.eigh(a.toarray())
        vals, vecs = vals[::-1][: k + 1], vecs[:, ::-1][:, : k + 1]
    else:
        v0 = np.sqrt(graph.degrees)  # exact trivial eigenvector speeds convergence
        try:
            vals, vecs = spla.eigsh(a.tocsc(), k=k + 1, which="LA", v0=v0)
        except spla.ArpackNoConvergence as exc:
            raise NumericalError(
                f"eigensolver did not converge: {len(exc.eigenvalues)} of {k + 1} "
                f"eigenpairs after ARPACK iteration limit"
            ) from exc
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]

    if abs(vals[0] - 1.0) > 1e-6:
        raise NumericalError(f"leading eigenvalue {vals[0]:.3e} is not 1; invalid graph")
    if vals[1] > 1.0 - 1e-10:
        raise NumericalError("second eigenvalue is 1: the graph is disconnected")

    eigenvalues = vals[1:].copy()
    eigenvectors = vecs[:, 1:] * inv_sqrt[:, None]
    eigenvectors /= np.linalg.norm(eigenvectors, axis=0, keepdims=True)
    eigenvectors = _fix_signs(eigenvectors)

    return SpectralModel(
        eigenvalues=eigenvalues,
        eigenvectors=eigenvectors,
        points=graph.points,
        rho=graph.rho,
        sigma=graph.sigma,
        knn_radius=graph.knn_radius,
        k_neighbors=graph.k_neighbors,
        metric=graph.metric,
        train_hash=content_hash(graph.points),
    )


def embed_train(model: SpectralModel) -> np.ndarray:
    return model.embed_train()


def extend(model: SpectralModel, new_points) -> np.ndarray:
    return model.extend(new_points)


def rayleigh_quotient(outputs: np.ndarray, graph: AffinityGraph) -> float:
    """tr(Y^T (D - W) Y)/sum(D) with degree-weighted whitened outputs.

    Normalises the raw map outputs exactly like the training-time output
    layer (whitening in the degree inner product, in which random-walk
    eigenvectors are orthonormal), so the value is bounded below by the sum
    of the smallest non-trivial random-walk Laplacian eigenvalues.
    """
    p = graph.degrees / graph.degrees.sum()
    g = outputs - p @ outputs
    gram = g.T @ (p[:, None] * g)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("collapsed outputs: singular Gram matrix") from exc
    y = g @ np.linalg.inv(chol).T
    lap_y = graph.degrees[:, None] * y - graph.w @ y
    return float(np.sum(y * lap_y) / graph.degrees.sum())


class ParametricSpectralMap:
    """Trained neural map approximating the spectral embedding.

    The output frame (centring and whitening) is frozen from the training
    set at fit time, so train and test points share one affine map.
    """

    def __init__(self, net, train_points: np.ndarray, metric: str, k_neighbors: int,
                 out_mean: np.ndarray, out_whiten: np.ndarray):
        self.net = net
        self.train_points = np.asarray(train_points, dtype=np.float64)
        self.metric = metric
        self.k_neighbors = k_neighbors
        self.out_mean = out_mean
        self.out_whiten = out_whiten

    @property
    def k(self) -> int:
        return self.net.layer_dims[-1]

    def embed_train(self) -> np.ndarray:
        return self.extend(self.train_points)

    def extend(self, new_points) -> np.ndarray:
        pts = new_points.data if isinstance(new_points, EmbeddingSet) else np.asarray(new_points, dtype=np.float64)
        if pts.size == 0:
            return np.zeros((0, self.k))
        return (self.net.forward_raw(pts) - self.out_mean) @ self.out_whiten


def fit_spectral_parametric(
    emb,
    graph: AffinityGraph,
    k: int,
    train_config,
    hidden=(128, 128),
    seed: int | None = None,
    **train_kwargs,
) -> ParametricSpectralMap:
    """Train a parametric spectral map on the data behind `graph`."""
    from . import nn

    points = emb.data if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float64)
    if seed is None:
        seed = train_config.seed
    net = nn.Mlp(
        [points.shape[1], *hidden, k],
        activation="tanh",
        out_transform="cholesky_orthonormalize",
        seed=seed,
    )
    nn.train_spectralnet(
        net, points, train_config, k_neighbors=graph.k_neighbors, metric=graph.metric, **train_kwargs
    )
    raw = net.forward_raw(points)
    p = graph.degrees / graph.degrees.sum()
    mean = p @ raw
    g = raw - mean
    chol = np.linalg.cholesky(g.T @ (p[:, None] * g) + 1e-12 * np.eye(k))
    return ParametricSpectralMap(
        net, points, graph.metric, graph.k_neighbors,
        out_mean=mean, out_whiten=np.linalg.inv(chol).T,
    )
