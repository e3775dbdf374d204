"""Quantitative diagnostics: retrieval, classification, random-walk
similarity experiments, modality gap, and scenario sweeps.

All similarity-based metrics use cosine geometry. Every experiment is pure
given its inputs and seed; reports serialise to JSON (full, including raw
distance samples) and to flat two-column CSV.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import mannwhitneyu

from .align import AlignmentModel, SueConfig, fit_sue
from .errors import ConfigError
from .graph import build_affinity, random_walk
from .io import EmbeddingSet, PairManifest
from .nn import Mlp, TrainConfig, train_contrastive
from .synth import SyntheticScenario, generate, weaken


@dataclass
class EvalReport:
    task: str
    metrics: dict
    config: dict = field(default_factory=dict)
    seed: int = 0
    n_test: int = 0
    samples: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "task": self.task,
                "metrics": self.metrics,
                "config": self.config,
                "seed": self.seed,
                "n_test": self.n_test,
                "samples": self.samples,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            task=d["task"],
            metrics=d["metrics"],
            config=d["config"],
            seed=d["seed"],
            n_test=d["n_test"],
            samples=d.get("samples", {}),
        )

    def metrics_csv(self) -> str:
        lines = ["metric,value"]
        lines += [f"{k},{self.metrics[k]!r}" for k in sorted(self.metrics)]
        return "\n".join(lines) + "\n"

    def samples_csv(self) -> str:
        keys = sorted(self.samples)
        length = max((len(self.samples[k]) for k in keys), default=0)
        lines = [",".join(keys)]
        for i in range(length):
            lines.append(
                ",".join(repr(self.samples[k][i]) if i < len(self.samples[k]) else "" for k in keys)
            )
        return "\n".join(lines) + "\n"


def _unit(rows: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-30)
    return rows / norms


def recall_at_k(queries: np.ndarray, gallery: np.ndarray, ks) -> dict:
    """Recall@k by cosine similarity; row i's true partner is gallery row i.

    Gallery ties are broken toward the lower index.
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape != g.shape:
        raise ConfigError(f"queries {q.shape} and gallery {g.shape} must be row-paired")
    t = q.shape[0]
    ks = [int(k) for k in ks]
    if t == 0 or min(ks) < 1:
        raise ConfigError("need at least one item and ks >= 1")
    sim = _unit(q) @ _unit(g).T
    own = np.diag(sim)
    better = (sim > own[:, None]).sum(axis=1)
    tied_lower = np.array(
        [(sim[i, :i] == own[i]).sum() for i in range(t)], dtype=np.int64
    )
    rank = 1 + better + tied_lower
    return {k: float(100.0 * np.mean(rank <= k)) for k in ks}


def zero_shot(embeddings: np.ndarray, label_prototypes: np.ndarray, true_labels) -> float:
    """Accuracy (%) of argmax-cosine classification against prototypes."""
    prototypes = np.asarray(label_prototypes, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= prototypes.shape[0]:
        raise ConfigError("label id out of range for the prototype matrix")
    sim = _unit(np.asarray(embeddings, dtype=np.float64)) @ _unit(prototypes).T
    return float(100.0 * np.mean(sim.argmax(axis=1) == labels))


def knn_classify(train_emb: np.ndarray, train_labels, test_emb: np.ndarray, k: int = 5) -> np.ndarray:
    """Majority vote among the k cosine-nearest training points.

    Vote ties go to the label with the smaller summed distance, then to the
    lower label id.
    """
    train = np.asarray(train_emb, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if train.shape[0] == 0:
        raise ConfigError("empty training set")
    if k > train.shape[0]:
        raise ConfigError(f"k={k} exceeds training size {train.shape[0]}")
    dist = 1.0 - _unit(np.asarray(test_emb, dtype=np.float64)) @ _unit(train).T
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    out = np.empty(dist.shape[0], dtype=np.int64)
    for i in range(dist.shape[0]):
        nbr_labels = labels[order[i]]
        nbr_dists = dist[i, order[i]]
        candidates = {}
        for lab, d in zip(nbr_labels, nbr_dists):
            cnt, tot = candidates.get(lab, (0, 0.0))
            candidates[lab] = (cnt + 1, tot + d)
        out[i] = min(candidates, key=lambda lab: (-candidates[lab][0], candidates[lab][1], lab))
    return out


def rw_similarity(p_a: np.ndarray, p_b: np.ndarray) -> float:
    """Normalised Frobenius distance ||A - B||_F / ||A + B||_F."""
    a = np.asarray(p_a, dtype=np.float64)
    b = np.asarray(p_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a + b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def modality_gap(emb_x: np.ndarray, emb_y: np.ndarray) -> float:
    """Centroid separation over mean within-modality spread."""
    x = np.asarray(emb_x, dtype=np.float64)
    y = np.asarray(emb_y, dtype=np.float64)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ConfigError("need at least 2 points per modality")
    if x.shape[1] != y.shape[1]:
        raise ConfigError(f"dim mismatch: {x.shape[1]} vs {y.shape[1]}")
    cx, cy = x.mean(axis=0), y.mean(axis=0)
    spread = np.concatenate(
        [np.linalg.norm(x - cx, axis=1), np.linalg.norm(y - cy, axis=1)]
    ).mean()
    if spread == 0.0:
        return 0.0 if np.allclose(cx, cy) else float("inf")
    return float(np.linalg.norm(cx - cy) / spread)


def rw_universality_experiment(
    x: EmbeddingSet,
    y: EmbeddingSet,
    pairs: PairManifest,
    batch_size: int = 9,
    n_batches: int = 1000,
    seed: int = 0,
    k_graph: int | None = None,
    metric: str = "cosine",
) -> EvalReport:
    """Compare random walks built independently on paired sample batches.

    For each batch of known pairs, a walk matrix is built per modality and
    the paired distance recorded; the control rebuilds the second modality's
    walk on the same rows in shuffled order. Reports both distance samples,
    their means, and a two-sided rank-sum p-value.
    """
    if n_batches < 1:
        raise ConfigError("n_batches must be >= 1")
    if pairs.m < batch_size:
        raise ConfigError(f"need at least batch_size={batch_size} pairs, got {pairs.m}")
    pairs.validate_range(x.n, y.n)
    k = batch_size - 1 if k_graph is None else k_graph
    rng = np.random.default_rng(seed)
    paired_d, shuffled_d = [], []
    for _ in range(n_batches):
        sel = pairs.pairs[rng.choice(pairs.m, batch_size, replace=False)]
        xb = x.data[sel[:, 0]]
        yb = y.data[sel[:, 1]]
        p_x = random_walk(build_affinity(xb, k=k, metric=metric)).toarray()
        p_y = random_walk(build_affinity(yb, k=k, metric=metric)).toarray()
        paired_d.append(rw_similarity(p_x, p_y))
        p_y_shuf = random_walk(
            build_affinity(yb[rng.permutation(batch_size)], k=k, metric=metric)
        ).toarray()
        shuffled_d.append(rw_similarity(p_x, p_y_shuf))
    stat = mannwhitneyu(paired_d, shuffled_d, alternative="two-sided")
    return EvalReport(
        task="rw_universality",
        metrics={
            "rw_dist_paired_mean": float(np.mean(paired_d)),
            "rw_dist_shuffled_mean": float(np.mean(shuffled_d)),
            "p_value": float(stat.pvalue),
        },
        config={"batch_size": batch_size, "n_batches": n_batches, "k_graph": k, "metric": metric},
        seed=seed,
        n_test=n_batches,
        samples={"paired": [float(v) for v in paired_d], "shuffled": [float(v) for v in shuffled_d]},
    )


def paired_distance_experiment(model: AlignmentModel, x_test, y_test, seed: int = 0) -> EvalReport:
    """Cosine distances between mapped true pairs vs shuffled pairs."""
    fx = model.map_x(x_test)
    fy = model.map_y(y_test)
    t = fx.shape[0]
    if t < 2 or fy.shape[0] != t:
        raise ConfigError("need at least 2 row-paired test samples")
    ux, uy = _unit(fx), _unit(fy)
    paired = 1.0 - np.sum(ux * uy, axis=1)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(t)
    while np.all(perm == np.arange(t)):
        perm = rng.permutation(t)
    shuffled = 1.0 - np.sum(ux * uy[perm], axis=1)
    stat = mannwhitneyu(paired, shuffled, alternative="two-sided")
    return EvalReport(
        task="paired_distance",
        metrics={
            "paired_mean": float(paired.mean()),
            "shuffled_mean": float(shuffled.mean()),
            "p_value": float(stat.pvalue),
        },
        seed=seed,
        n_test=t,
        samples={"paired": [float(v) for v in paired], "shuffled": [float(v) for v in shuffled]},
    )


# ---------------------------------------------------------------------------
# Scenario-level experiments
# ---------------------------------------------------------------------------


def _contrastive_baseline(
    weak, test_x: np.ndarray, test_y: np.ndarray, out_dim: int, seed: int,
    hidden=(128, 128), epochs: int = 300, temperature: float = 0.07,
):
    """Paired-only baseline: MLPs on the raw features, symmetric InfoNCE."""
    sel = weak.manifest.pairs
    px = weak.x_set.data[sel[:, 0]]
    py = weak.y_set.data[sel[:, 1]]
    net_x = Mlp([px.shape[1], *hidden, out_dim], seed=seed)
    net_y = Mlp([py.shape[1], *hidden, out_dim], seed=seed + 1)
    cfg = TrainConfig(
        learning_rate=1e-3,
        optimizer="adamw",
        weight_decay=1e-2,
        epochs=epochs,
        batch_size=min(256, max(2, sel.shape[0])),
        seed=seed,
    )
    train_contrastive(net_x, net_y, px, py, cfg, temperature=temperature)
    return net_x.forward(test_x), net_y.forward(test_y)


def run_retrieval_experiment(
    scenario: SyntheticScenario,
    m_pairs: int,
    n_test: int,
    config: SueConfig,
    seed: int,
    variant: str = "sue",
    ks=(1, 5, 10),
    removal_frac: float = 0.10,
) -> EvalReport:
    """Generate, weaken, fit one variant, and score held-out retrieval.

    The test block is generated alongside the training pool from the same
    latent process and stays fully paired, mirroring how real evaluation
    sets are held out before the unpairing protocol.
    """
    full = replace(scenario, n=scenario.n + n_test, seed=seed)
    x_all, y_all, _ = generate(full)
    test_x = x_all.data[scenario.n :]
    test_y = y_all.data[scenario.n :]
    train_x = EmbeddingSet(x_all.data[: scenario.n], name=x_all.name, labels=x_all.labels[: scenario.n])
    train_y = EmbeddingSet(y_all.data[: scenario.n], name=y_all.name, labels=y_all.labels[: scenario.n])
    weak = weaken(train_x, train_y, m=m_pairs, removal_frac=removal_frac, seed=seed)

    if variant == "contrastive":
        fx, fy = _contrastive_baseline(weak, test_x, test_y, out_dim=config.cca_dim, seed=seed)
        model_config = {"variant": "contrastive", "out_dim": config.cca_dim}
    elif variant == "sue":
        model = fit_sue(weak.x_set, weak.y_set, weak.manifest, replace(config, seed=seed))
        fx = model.map_x(test_x)
        fy = model.map_y(test_y)
        model_config = model.config
    else:
        raise ConfigError(f"unknown variant '{variant}'")

    x2y = recall_at_k(fx, fy, ks)
    y2x = recall_at_k(fy, fx, ks)
    metrics = {f"r_at_{k}_x2y": x2y[k] for k in x2y}
    metrics.update({f"r_at_{k}_y2x": y2x[k] for k in y2x})
    for k in x2y:
        metrics[f"r_at_{k}"] = 0.5 * (x2y[k] + y2x[k])
    metrics["modality_gap"] = modality_gap(fx, fy)
    return EvalReport(
        task=f"retrieval_{variant}",
        metrics=metrics,
        config={
            "scenario": {
                "latent_kind": scenario.latent_kind,
                "latent_dim": scenario.latent_dim,
                "n": scenario.n,
                "n_components": scenario.n_components,
                "d1": scenario.d1,
                "d2": scenario.d2,
                "noise": scenario.noise,
            },
            "m_pairs": m_pairs,
            "removal_frac": removal_frac,
            "variant": variant,
            "model": model_config,
        },
        seed=seed,
        n_test=n_test,
    )


GRID_KEYS = {
    "n_unpaired", "m_pairs", "seed", "variant",
    "use_spectral", "use_cca", "use_mmd", "label",
}


def sweep(
    config_grid,
    scenario: SyntheticScenario,
    base_config: SueConfig,
    n_test: int = 400,
    ks=(1, 5, 10),
):
    """One report per grid point; per-point failures become error reports."""
    reports = []
    for point in config_grid:
        unknown = set(point) - GRID_KEYS
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        seed = int(point.get("seed", scenario.seed))
        scen = replace(scenario, n=int(point.get("n_unpaired", scenario.n)))
        cfg = replace(
            base_config,
            use_spectral=bool(point.get("use_spectral", base_config.use_spectral)),
            use_cca=bool(point.get("use_cca", base_config.use_cca)),
            use_mmd=bool(point.get("use_mmd", base_config.use_mmd)),
        )
        try:
            report = run_retrieval_experiment(
                scen,
                m_pairs=int(point.get("m_pairs", 50)),
                n_test=n_test,
                config=cfg,
                seed=seed,
                variant=point.get("variant", "sue"),
                ks=ks,
            )
            report.config["grid_point"] = dict(point)
        except Exception as exc:  # keep sweeping, record the failure
            report = EvalReport(
                task="error",
                metrics={},
                config={"grid_point": dict(point), "error": f"{type(exc).__name__}: {exc}"},
                seed=seed,
                n_test=n_test,
            )
        reports.append(report)
    return reports
