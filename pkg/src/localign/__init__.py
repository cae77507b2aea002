"""Local/global image-text alignment pre-training, evaluated at desk scale.

The package trains a pair of small encoders on synthetic image-report pairs
with a composite contrastive objective — a global InfoNCE term in each
direction plus a local term whose targets come from intra-modal similarity
structure — and evaluates the result with phrase-grounding contrast-to-noise
scores and linear-probe segmentation.
"""

from .config import ConfigError, config_hash, parse_config_text
from .embeddings import (
    ContractViolation,
    GlobalEmbedding,
    LocalEmbeddings,
    Modality,
    SimilarityMatrix,
)
from .encoders import Report
from .evaluation import (
    GroundingReport,
    ProbeConfig,
    build_grounding_cases,
    cnr,
    dice,
    export_heatmap,
    grounding_report,
    linear_probe_train,
    preservation_score,
    probe_dice_scores,
    report_csv,
    similarity_map,
)
from .gradcheck import full_objective_gradient_check, gradient_check
from .losses import LossBundle, LossConfig, Reduction, total_loss
from .model import AlignmentModel, ModelConfig, build_model
from .synthetic import (
    AlignedSample,
    SyntheticWorldConfig,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .training import (
    AugmentConfig,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlignedSample",
    "AlignmentModel",
    "AugmentConfig",
    "ConfigError",
    "ContractViolation",
    "GlobalEmbedding",
    "GroundingReport",
    "LocalEmbeddings",
    "LossBundle",
    "LossConfig",
    "Modality",
    "ModelConfig",
    "ProbeConfig",
    "Reduction",
    "Report",
    "SimilarityMatrix",
    "SyntheticWorldConfig",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "__version__",
    "build_grounding_cases",
    "build_model",
    "cnr",
    "config_hash",
    "dice",
    "export_heatmap",
    "full_objective_gradient_check",
    "generate_dataset",
    "gradient_check",
    "grounding_report",
    "linear_probe_train",
    "load_checkpoint",
    "parse_config_text",
    "preservation_score",
    "probe_dice_scores",
    "read_dataset",
    "report_csv",
    "save_checkpoint",
    "similarity_map",
    "total_loss",
    "train",
    "write_dataset",
]
