"""Synthetic two-modality scenarios from a shared latent space.

Both modalities are smooth distortions of the same latent sample: a seeded
random full-rank linear lift, a coordinate-wise monotone tanh warp with
random gains, and isotropic Gaussian noise. The weakening protocol keeps m
true pairs, independently removes a fraction of the remaining samples from
each modality, and shuffles row order so indices carry no correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .io import EmbeddingSet, PairManifest


@dataclass
class SyntheticScenario:
    latent_kind: str = "gaussian_mixture"  # | "two_moons" | "swiss_roll"
    latent_dim: int = 8
    n: int = 2000
    n_components: int = 10
    component_spread: float = 2.0
    component_std: float = 1.0
    d1: int = 64
    d2: int = 96
    noise: float = 0.05
    nonlinearity: str = "tanh"  # | "identity"
    gain_range: tuple = (2.0, 8.0)  # strong warps keep pair-only fits from inverting the map
    offset_scale: float = 0.0  # random tanh offsets make the warp saturate asymmetrically
    private_dim: int = 0  # per-modality nuisance factors lifted alongside the shared latent
    private_scale: float = 2.0
    radial_scale: float = 0.0  # log-normal per-sample magnitude jitter (invisible to cosine)
    shared_map: bool = False  # modality 2 reuses modality 1's lift and gains
    seed: int = 0

    def __post_init__(self):
        if self.latent_kind not in ("gaussian_mixture", "two_moons", "swiss_roll"):
            raise ConfigError(f"unknown latent kind '{self.latent_kind}'")
        if self.latent_kind == "two_moons" and self.latent_dim != 2:
            raise ConfigError("two_moons requires latent_dim=2")
        if self.latent_kind == "swiss_roll" and self.latent_dim != 3:
            raise ConfigError("swiss_roll requires latent_dim=3")
        if self.noise < 0:
            raise ConfigError("noise scale must be >= 0")
        if min(self.d1, self.d2) < self.latent_dim + self.private_dim:
            raise ConfigError(
                f"lift dims ({self.d1}, {self.d2}) must not be below "
                f"latent_dim + private_dim = {self.latent_dim + self.private_dim}"
            )
        if self.nonlinearity not in ("tanh", "identity"):
            raise ConfigError(f"unknown nonlinearity '{self.nonlinearity}'")


@dataclass
class WeakPairing:
    """Weakly-paired view of a scenario; latent ids are for evaluation only."""

    x_set: EmbeddingSet
    y_set: EmbeddingSet
    manifest: PairManifest
    x_latent_ids: np.ndarray
    y_latent_ids: np.ndarray


def _latents(scenario: SyntheticScenario, rng: np.random.Generator):
    n, p = scenario.n, scenario.latent_dim
    if scenario.latent_kind == "gaussian_mixture":
        means = scenario.component_spread * rng.standard_normal((scenario.n_components, p))
        comp = rng.integers(0, scenario.n_components, n)
        z = means[comp] + scenario.component_std * rng.standard_normal((n, p))
        return z, comp.astype(np.int64)
    if scenario.latent_kind == "two_moons":
        half = n // 2
        theta = rng.uniform(0.0, np.pi, n)
        z = np.empty((n, 2))
        z[:half, 0] = np.cos(theta[:half])
        z[:half, 1] = np.sin(theta[:half])
        z[half:, 0] = 1.0 - np.cos(theta[half:])
        z[half:, 1] = 0.5 - np.sin(theta[half:])
        z += 0.08 * rng.standard_normal((n, 2))
        labels = np.zeros(n, dtype=np.int64)
        labels[half:] = 1
        return z, labels
    # swiss roll: labelled by quartile of the unrolled coordinate
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=n))
    h = 21.0 * rng.uniform(size=n)
    z = np.column_stack([t * np.cos(t), h, t * np.sin(t)])
    edges = np.quantile(t, [0.25, 0.5, 0.75])
    return z, np.searchsorted(edges, t).astype(np.int64)


class _ModalityMap:
    def __init__(self, rng: np.random.Generator, latent_dim: int, out_dim: int, scenario: SyntheticScenario):
        in_dim = latent_dim + scenario.private_dim
        self.lift = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
        self.gains = rng.uniform(*scenario.gain_range, out_dim)
        self.offsets = scenario.offset_scale * rng.standard_normal(out_dim)
        self.noise = scenario.noise
        self.identity = scenario.nonlinearity == "identity"
        self.private_dim = scenario.private_dim
        self.private_scale = scenario.private_scale
        self.radial_scale = scenario.radial_scale

    def __call__(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.private_dim:
            # modality-private content: each side of a pair draws its own
            private = self.private_scale * rng.standard_normal((z.shape[0], self.private_dim))
            z = np.hstack([z, private])
        u = z @ self.lift.T
        out = u if self.identity else np.tanh(self.gains * (u - self.offsets)) / self.gains
        if self.radial_scale > 0:
            out = out * np.exp(self.radial_scale * rng.standard_normal((z.shape[0], 1)))
        if self.noise > 0:
            out = out + self.noise * rng.standard_normal(out.shape)
        return out


def generate(scenario: SyntheticScenario):
    """Sample (x_set, y_set, labels); rows i of x and y are true pairs."""
    rng = np.random.default_rng(scenario.seed)
    z, labels = _latents(scenario, rng)
    map_x = _ModalityMap(rng, scenario.latent_dim, scenario.d1, scenario)
    if scenario.shared_map:
        if scenario.d1 != scenario.d2:
            raise ConfigError("shared_map requires d1 == d2")
        map_y = map_x
    else:
        map_y = _ModalityMap(rng, scenario.latent_dim, scenario.d2, scenario)
    x = map_x(z, rng)
    y = map_y(z, rng)
    return (
        EmbeddingSet(x, name="modality_x", labels=labels),
        EmbeddingSet(y, name="modality_y", labels=labels),
        labels,
    )


def weaken(
    x_set: EmbeddingSet,
    y_set: EmbeddingSet,
    m: int,
    removal_frac: float = 0.10,
    seed: int = 0,
) -> WeakPairing:
    """Keep m pairs, drop floor(frac * rest) per modality, shuffle rows."""
    n = x_set.n
    if y_set.n != n:
        raise ConfigError(f"paired inputs must have equal length, got {n} and {y_set.n}")
    if not 0.0 <= removal_frac < 1.0:
        raise ConfigError("removal_frac must lie in [0, 1)")
    if m > n * (1.0 - removal_frac):
        raise ConfigError(f"pair budget m={m} too large for n={n}, removal_frac={removal_frac}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pair_ids, rest = order[:m], order[m:]
    n_drop = int(np.floor(removal_frac * rest.size))

    # independent removals and shuffles per modality
    kept_x = rest[rng.permutation(rest.size)[: rest.size - n_drop]]
    kept_y = rest[rng.permutation(rest.size)[: rest.size - n_drop]]
    src_x = np.concatenate([pair_ids, kept_x])
    src_y = np.concatenate([pair_ids, kept_y])
    perm_x = rng.permutation(src_x.size)
    perm_y = rng.permutation(src_y.size)
    src_x = src_x[perm_x]
    src_y = src_y[perm_y]
    pos_x = np.argsort(perm_x, kind="stable")[:m]  # final row of pair t on the X side
    pos_y = np.argsort(perm_y, kind="stable")[:m]

    labels_x = x_set.labels[src_x] if x_set.labels is not None else None
    labels_y = y_set.labels[src_y] if y_set.labels is not None else None
    manifest = PairManifest(np.column_stack([pos_x, pos_y]))
    weak = WeakPairing(
        x_set=EmbeddingSet(x_set.data[src_x], name=x_set.name, labels=labels_x),
        y_set=EmbeddingSet(y_set.data[src_y], name=y_set.name, labels=labels_y),
        manifest=manifest,
        x_latent_ids=src_x,
        y_latent_ids=src_y,
    )
    manifest.validate_range(weak.x_set.n, weak.y_set.n)
    return weak


def acceptance_scenario(seed: int = 0, n: int = 2000) -> SyntheticScenario:
    """Default desk-scale scenario used throughout the test harness.

    The modality maps carry three kinds of nuisance on top of the shared
    mixture: strong saturating warps, per-modality private factors, and
    per-sample magnitude jitter. Together they keep the cross-modal map out
    of reach of pair-only fits (which see 50 rows), while the cosine-metric
    graph built on the full unpaired pools is nearly unaffected.
    """
    return SyntheticScenario(
        latent_kind="gaussian_mixture",
        latent_dim=8,
        n=n,
        n_components=10,
        component_spread=4.0,
        d1=64,
        d2=96,
        noise=0.05,
        private_dim=24,
        private_scale=1.5,
        radial_scale=0.8,
        seed=seed,
    )
