"""Patch-feature anomaly detection.

Pipeline: precomputed CNN feature maps -> locally aggregated patch
features -> linear representation trained with a relaxed contrastive
objective under similarity-derived soft pairing weights -> greedy
k-center memory bank -> reweighted nearest-neighbor anomaly scores with
robust normalization, fusion, and AUROC/F1 evaluation.
"""

from .errors import PatchbankError
from .feature_io import (
    DatasetManifest,
    SampleEntry,
    TensorF32,
    load_manifest,
    read_tensor,
    write_tensor,
)
from .patch_features import (
    PatchFeatureSet,
    aggregate_neighborhood,
    merge_hierarchies,
)
from .similarity import (
    SimilarityConfig,
    combine,
    combined_similarity,
    contextual_similarity,
    knn_sets,
    pairwise_similarity,
)
from .repr_learning import (
    RepresentationModel,
    TrainConfig,
    embed,
    ema_update,
    forward_f,
    forward_g,
    init_model,
    load_model,
    loss_gradients,
    relative_distances,
    relaxed_contrastive_loss,
    save_model,
    train,
)
from .memory_bank import (
    MemoryBank,
    build_bank,
    config_fingerprint,
    greedy_coreset,
    load_bank,
    save_bank,
)
from .scoring import (
    NormStats,
    ScoreMap,
    discriminability,
    fit_norm_stats,
    fuse,
    image_score,
    normalize,
    patch_scores,
    upsample_map,
)
from .evaluation import auroc, f1_optimal_threshold, pixel_auroc
from .config import PipelineConfig, load_config

__version__ = "0.1.0"
