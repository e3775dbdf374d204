"""Few-pair CCA alignment and the full embedding pipeline.

Pipeline order: spectral embeddings are fitted per modality on all data
(paired and unpaired alike); closed-form regularised CCA on the few known
pairs resolves the rotation/sign ambiguity between the two embeddings; a
residual net trained on the squared MMD of the two projected clouds closes
the remaining distributional gap using no pairing information. The final
maps are f_x = project . extend and f_y = residual . project . extend.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, NumericalError, StageError
from .graph import build_affinity
from .io import EmbeddingSet, PairManifest
from .nn import MmdKernel, Mlp, TrainConfig, train_mmd_residual
from .spectral import ParametricSpectralMap, SpectralModel, fit_spectral, fit_spectral_parametric


@dataclass
class CcaProjection:
    """Per-modality projections maximising correlation of paired rows."""

    q_x: np.ndarray  # (k_x, r)
    q_y: np.ndarray  # (k_y, r)
    correlations: np.ndarray  # (r,), descending, in [0, 1]
    mean_x: np.ndarray
    mean_y: np.ndarray
    ridge: np.ndarray  # (eps_x, eps_y) actually used

    @property
    def r(self) -> int:
        return self.q_x.shape[1]


def _inv_sqrt_psd(mat: np.ndarray, eps: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat + eps * np.eye(mat.shape[0]))
    if vals.min() <= 1e-300:
        raise NumericalError(
            "rank-deficient covariance with no ridge; pass ridge > 0"
        )
    return (vecs / np.sqrt(vals)) @ vecs.T


def fit_cca(
    emb_x: np.ndarray,
    emb_y: np.ndarray,
    r: int,
    ridge: float | None = None,
    auto_ridge_scale: float = 1e-4,
) -> CcaProjection:
    """Closed-form regularised CCA on row-paired matrices.

    With `ridge=None` each side uses eps = auto_ridge_scale * tr(cov)/dim,
    which keeps the whitening well posed when the pair count barely
    exceeds r.
    """
    x = np.asarray(emb_x, dtype=np.float64)
    y = np.asarray(emb_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ConfigError(f"row-paired matrices required, got {x.shape} and {y.shape}")
    m = x.shape[0]
    if not 1 <= r <= min(x.shape[1], y.shape[1]):
        raise ConfigError(f"r={r} must lie in [1, min(k_x, k_y)={min(x.shape[1], y.shape[1])}]")
    if m < r:
        raise ConfigError(f"need at least r={r} pairs, got m={m}")
    mean_x = x.mean(axis=0)
    mean_y = y.mean(axis=0)
    xc = x - mean_x
    yc = y - mean_y
    s_xx = xc.T @ xc / m
    s_yy = yc.T @ yc / m
    s_xy = xc.T @ yc / m
    eps_x = auto_ridge_scale * np.trace(s_xx) / x.shape[1] if ridge is None else float(ridge)
    eps_y = auto_ridge_scale * np.trace(s_yy) / y.shape[1] if ridge is None else float(ridge)
    w_x = _inv_sqrt_psd(s_xx, eps_x)
    w_y = _inv_sqrt_psd(s_yy, eps_y)
    u, sing, vt = np.linalg.svd(w_x @ s_xy @ w_y)
    u, v = u[:, :r], vt.T[:, :r]
    # pin the SVD sign ambiguity (flip u and v together)
    lead = np.abs(u).argmax(axis=0)
    flip = u[lead, np.arange(r)] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return CcaProjection(
        q_x=w_x @ u,
        q_y=w_y @ v,
        correlations=np.clip(sing[:r], 0.0, 1.0),
        mean_x=mean_x,
        mean_y=mean_y,
        ridge=np.array([eps_x, eps_y]),
    )


def project(cca: CcaProjection, side: str, batch: np.ndarray) -> np.ndarray:
    """(batch - mean_side) @ Q_side."""
    batch = np.asarray(batch, dtype=np.float64)
    if side == "x":
        mean, q = cca.mean_x, cca.q_x
    elif side == "y":
        mean, q = cca.mean_y, cca.q_y
    else:
        raise ConfigError(f"side must be 'x' or 'y', got '{side}'")
    if batch.shape[1] != q.shape[0]:
        raise ConfigError(f"batch width {batch.shape[1]} does not match projection {q.shape}")
    return (batch - mean) @ q


@dataclass
class SueConfig:
    """Resolved pipeline configuration (hyper-parameter defaults baked in)."""

    k_neighbors: int = 100
    metric: str = "cosine"
    se_dim: int = 10
    se_path: str = "numeric"  # "numeric" | "parametric"
    cca_dim: int = 8
    ridge: float | None = None
    ridge_scale: float = 1e-4  # auto-ridge factor used when ridge is None
    pair_budget: int | None = None
    use_spectral: bool = True
    use_cca: bool = True
    use_mmd: bool = True
    mmd_hidden: tuple = (128, 128, 128)
    mmd_epochs: int = 100
    mmd_batch_size: int = 256
    mmd_learning_rate: float = 1e-3
    mmd_weight_decay: float = 1e-2
    mmd_optimizer: str = "adamw"
    mmd_patience: int = 20
    kernel_multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    se_epochs: int = 40
    se_batch_size: int = 512
    se_learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.se_path not in ("numeric", "parametric"):
            raise ConfigError(f"unknown spectral path '{self.se_path}'")
        if self.use_spectral and self.use_cca and not self.se_dim > self.cca_dim >= 1:
            raise ConfigError(
                f"need se_dim > cca_dim >= 1, got se_dim={self.se_dim}, cca_dim={self.cca_dim}"
            )

    def snapshot(self) -> dict:
        d = asdict(self)
        d["mmd_hidden"] = list(self.mmd_hidden)
        d["kernel_multipliers"] = list(self.kernel_multipliers)
        return d


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


@dataclass
class AlignmentModel:
    """Fitted maps into the shared space; immutable after fit."""

    spectral_x: SpectralModel | ParametricSpectralMap | None
    spectral_y: SpectralModel | ParametricSpectralMap | None
    cca: CcaProjection | None
    residual: Mlp | None
    config: dict = field(default_factory=dict)
    mmd_history: list = field(default_factory=list)

    def _embed(self, side: str, points) -> np.ndarray:
        pts = points.data if isinstance(points, EmbeddingSet) else np.asarray(points, dtype=np.float64)
        spec = self.spectral_x if side == "x" else self.spectral_y
        emb = spec.extend(pts) if spec is not None else pts
        if self.cca is not None:
            emb = project(self.cca, side, emb)
        return emb

    def map_x(self, points) -> np.ndarray:
        return self._embed("x", points)

    def map_y(self, points) -> np.ndarray:
        emb = self._embed("y", points)
        return self.residual.forward(emb) if self.residual is not None else emb

    def save(self, path) -> None:
        arrays = {}
        meta = {"config": self.config, "has": {}}
        for side, spec in (("x", self.spectral_x), ("y", self.spectral_y)):
            if isinstance(spec, SpectralModel):
                meta["has"][f"spectral_{side}"] = "numeric"
                arrays.update(
                    {
                        f"s{side}_eigenvalues": spec.eigenvalues,
                        f"s{side}_eigenvectors": spec.eigenvectors,
                        f"s{side}_points": spec.points,
                        f"s{side}_rho": spec.rho,
                        f"s{side}_sigma": spec.sigma,
                        f"s{side}_knn_radius": spec.knn_radius,
                    }
                )
                meta[f"s{side}"] = {
                    "k_neighbors": spec.k_neighbors,
                    "metric": spec.metric,
                    "train_hash": spec.train_hash,
                }
            elif isinstance(spec, ParametricSpectralMap):
                meta["has"][f"spectral_{side}"] = "parametric"
                arrays[f"s{side}_points"] = spec.train_points
                arrays[f"s{side}_out_mean"] = spec.out_mean
                arrays[f"s{side}_out_whiten"] = spec.out_whiten
                meta[f"s{side}"] = {
                    "k_neighbors": spec.k_neighbors,
                    "metric": spec.metric,
                    "net": {
                        "layer_dims": spec.net.layer_dims,
                        "activation": spec.net.activation,
                        "residual": spec.net.residual,
                        "out_transform": spec.net.out_transform,
                    },
                }
                for i, (w, b) in enumerate(zip(spec.net.weights, spec.net.biases)):
                    arrays[f"s{side}_w{i}"] = w
                    arrays[f"s{side}_b{i}"] = b
            else:
                meta["has"][f"spectral_{side}"] = "none"
        if self.cca is not None:
            meta["has"]["cca"] = True
            arrays.update(
                {
                    "cca_qx": self.cca.q_x,
                    "cca_qy": self.cca.q_y,
                    "cca_corr": self.cca.correlations,
                    "cca_mx": self.cca.mean_x,
                    "cca_my": self.cca.mean_y,
                    "cca_ridge": self.cca.ridge,
                }
            )
        if self.residual is not None:
            meta["has"]["residual"] = {
                "layer_dims": self.residual.layer_dims,
                "activation": self.residual.activation,
                "residual": self.residual.residual,
                "out_transform": self.residual.out_transform,
            }
            for i, (w, b) in enumerate(zip(self.residual.weights, self.residual.biases)):
                arrays[f"res_w{i}"] = w
                arrays[f"res_b{i}"] = b
        np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "AlignmentModel":
        from .io import content_hash

        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            spectral = {}
            for side in ("x", "y"):
                kind = meta["has"].get(f"spectral_{side}", "none")
                if kind == "numeric":
                    info = meta[f"s{side}"]
                    spec = SpectralModel(
                        eigenvalues=z[f"s{side}_eigenvalues"],
                        eigenvectors=z[f"s{side}_eigenvectors"],
                        points=z[f"s{side}_points"],
                        rho=z[f"s{side}_rho"],
                        sigma=z[f"s{side}_sigma"],
                        knn_radius=z[f"s{side}_knn_radius"],
                        k_neighbors=int(info["k_neighbors"]),
                        metric=info["metric"],
                        train_hash=info["train_hash"],
                    )
                    if content_hash(spec.points) != spec.train_hash:
                        raise NumericalError("checkpoint training-set hash mismatch")
                    spectral[side] = spec
                elif kind == "parametric":
                    info = meta[f"s{side}"]
                    net = Mlp(**info["net"])
                    for i in range(len(net.weights)):
                        net.weights[i] = z[f"s{side}_w{i}"].astype(np.float64)
                        net.biases[i] = z[f"s{side}_b{i}"].astype(np.float64)
                    spectral[side] = ParametricSpectralMap(
                        net,
                        z[f"s{side}_points"],
                        info["metric"],
                        int(info["k_neighbors"]),
                        out_mean=z[f"s{side}_out_mean"],
                        out_whiten=z[f"s{side}_out_whiten"],
                    )
                else:
                    spectral[side] = None
            cca = None
            if meta["has"].get("cca"):
                cca = CcaProjection(
                    q_x=z["cca_qx"],
                    q_y=z["cca_qy"],
                    correlations=z["cca_corr"],
                    mean_x=z["cca_mx"],
                    mean_y=z["cca_my"],
                    ridge=z["cca_ridge"],
                )
            residual = None
            if meta["has"].get("residual"):
                residual = Mlp(**meta["has"]["residual"])
                for i in range(len(residual.weights)):
                    residual.weights[i] = z[f"res_w{i}"].astype(np.float64)
                    residual.biases[i] = z[f"res_b{i}"].astype(np.float64)
        return cls(
            spectral_x=spectral["x"],
            spectral_y=spectral["y"],
            cca=cca,
            residual=residual,
            config=meta["config"],
        )


def _fit_spectral_side(data: np.ndarray, config: SueConfig, stage_seed: int):
    k = min(config.k_neighbors, data.shape[0] - 1)
    graph = build_affinity(data, k=k, metric=config.metric)
    if config.se_path == "numeric":
        return fit_spectral(graph, config.se_dim)
    tc = TrainConfig(
        learning_rate=config.se_learning_rate,
        optimizer="adam",
        weight_decay=0.0,
        epochs=config.se_epochs,
        batch_size=config.se_batch_size,
        seed=stage_seed,
        early_stop_patience=10,
    )
    return fit_spectral_parametric(data, graph, config.se_dim, tc)


def fit_sue(
    x: EmbeddingSet,
    y: EmbeddingSet,
    pairs: PairManifest,
    config: SueConfig,
    prefit_spectral: tuple | None = None,
) -> AlignmentModel:
    """Run the full pipeline; stage failures are re-raised with the stage name.

    `prefit_spectral=(model_x, model_y)` reuses stage checkpoints so
    downstream-only ablations skip the eigensolves.
    """
    pairs.validate_range(x.n, y.n)
    spectral = {"x": None, "y": None}
    embeddings = {}
    for stage_id, (side, data) in enumerate((("x", x.data), ("y", y.data))):
        if config.use_spectral:
            try:
                if prefit_spectral is not None:
                    spectral[side] = prefit_spectral[stage_id]
                else:
                    spectral[side] = _fit_spectral_side(data, config, _stage_seed(config.seed, stage_id))
            except Exception as exc:
                raise StageError(f"spectral_{side}", exc) from exc
            embeddings[side] = spectral[side].embed_train()
        else:
            embeddings[side] = data

    cca = None
    if config.use_cca:
        try:
            if pairs.m == 0:
                raise ConfigError(
                    f"pairing stage requires at least {config.cca_dim} pairs, manifest is empty"
                )
            budget = pairs.m if config.pair_budget is None else min(config.pair_budget, pairs.m)
            sel = pairs.pairs[:budget]
            cca = fit_cca(
                embeddings["x"][sel[:, 0]],
                embeddings["y"][sel[:, 1]],
                config.cca_dim,
                config.ridge,
                auto_ridge_scale=config.ridge_scale,
            )
            embeddings = {side: project(cca, side, emb) for side, emb in embeddings.items()}
        except StageError:
            raise
        except Exception as exc:
            raise StageError("cca", exc) from exc

    residual = None
    history = []
    if config.use_mmd:
        try:
            if embeddings["x"].shape[1] != embeddings["y"].shape[1]:
                raise ConfigError(
                    "distribution alignment needs equal dims on both sides "
                    f"({embeddings['x'].shape[1]} vs {embeddings['y'].shape[1]}); "
                    "enable the pairing stage or use matching inputs"
                )
            r = embeddings["y"].shape[1]
            residual = Mlp(
                [r, *config.mmd_hidden, r],
                activation="relu",
                residual=True,
                zero_init_last=True,
                seed=_stage_seed(config.seed, 2),
            )
            tc = TrainConfig(
                learning_rate=config.mmd_learning_rate,
                optimizer=config.mmd_optimizer,
                weight_decay=config.mmd_weight_decay,
                epochs=config.mmd_epochs,
                batch_size=config.mmd_batch_size,
                seed=_stage_seed(config.seed, 3),
                early_stop_patience=config.mmd_patience,
            )
            kernel = MmdKernel(multipliers=config.kernel_multipliers)
            residual, history = train_mmd_residual(
                residual, embeddings["y"], embeddings["x"], tc, kernel
            )
        except StageError:
            raise
        except Exception as exc:
            raise StageError("mmd", exc) from exc

    return AlignmentModel(
        spectral_x=spectral["x"],
        spectral_y=spectral["y"],
        cca=cca,
        residual=residual,
        config=config.snapshot(),
        mmd_history=history,
    )


def map_x(model: AlignmentModel, points) -> np.ndarray:
    return model.map_x(points)


def map_y(model: AlignmentModel, points) -> np.ndarray:
    return model.map_y(points)
