"""Shared cross-modal embeddings from almost exclusively unpaired data.

The pipeline: per-modality spectral embeddings of adaptive-kernel kNN
graphs, few-pair CCA alignment, and a residual MMD net that closes the
remaining distributional gap without any pairing information.
"""

from .align import AlignmentModel, CcaProjection, SueConfig, fit_cca, fit_sue, map_x, map_y, project
from .errors import ConfigError, FormatError, NumericalError, StageError, SueError
from .evaluation import (
    EvalReport,
    knn_classify,
    modality_gap,
    paired_distance_experiment,
    recall_at_k,
    rw_similarity,
    rw_universality_experiment,
    sweep,
    zero_shot,
)
from .graph import AffinityGraph, build_affinity, cosine_distance, laplacian, random_walk
from .io import EmbeddingSet, PairManifest, read_embeddings, read_pairs, write_embeddings, write_pairs
from .nn import MmdKernel, Mlp, TrainConfig, mmd_sq, train_contrastive, train_mmd_residual, train_spectralnet
from .spectral import SpectralModel, fit_spectral, fit_spectral_parametric
from .synth import SyntheticScenario, WeakPairing, generate, weaken

__version__ = "0.1.0"
