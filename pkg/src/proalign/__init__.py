"""Cross-modal prototype allocation for unsupervised slide embeddings."""

__version__ = "0.1.0"

from .core import (
    AssignmentMap,
    DatasetManifest,
    PrototypeBank,
    PrototypeDescriptor,
    PrototypeInitConfig,
    SlideEmbedding,
    SlideRecord,
    Stage,
    l2_normalize_rows,
    validate_embedding_matrix,
)
from .estimators import PoolingEmbedder, ProAlignEmbedder, ProbeClassifier
from .pfam import (
    allocation_report,
    assign_patches,
    build_slide_embedding,
    compute_patch_prototype_similarity,
    embed_slide,
    refine_prototypes,
)
from .prototypes import (
    build_initial_prototypes,
    compute_patch_text_similarity,
    kmeans_init,
    sample_training_patches,
)

__all__ = [
    "AssignmentMap",
    "DatasetManifest",
    "PoolingEmbedder",
    "ProAlignEmbedder",
    "ProbeClassifier",
    "PrototypeBank",
    "PrototypeDescriptor",
    "PrototypeInitConfig",
    "SlideEmbedding",
    "SlideRecord",
    "Stage",
    "allocation_report",
    "assign_patches",
    "build_initial_prototypes",
    "build_slide_embedding",
    "compute_patch_prototype_similarity",
    "compute_patch_text_similarity",
    "embed_slide",
    "kmeans_init",
    "l2_normalize_rows",
    "refine_prototypes",
    "sample_training_patches",
    "validate_embedding_matrix",
]
