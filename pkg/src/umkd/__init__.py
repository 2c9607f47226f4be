"""Multi-expert knowledge distillation for imbalanced ordinal grading.

Library surface: toy backbones with feature taps, shallow/compact feature
alignment losses, uncertainty-weighted decoupled logits distillation,
imbalance-controlled datasets, a training harness with KD/DKD baselines,
evaluation metrics, and a config-driven experiment CLI.
"""

from .align import (MappingSpec, ProjectionPair, build_mapping,
                    feature_alignment_loss, mmd_loss, reconstruction_loss)
from .backbones import (BackboneSpec, FeatureTaps, ToyBackbone, build_backbone,
                        forward_with_taps, freeze, load_checkpoint,
                        logits_map_from_features, save_checkpoint, state_hash)
from .cfa import DimAdapter, SphereSpace, adapt_and_pool, cfa_loss, project_to_sphere
from .datasets import (GradingDataset, ImbalanceProfile, SplitConfig, augment,
                       load_image_folder, split, subsample_to_profile,
                       synth_grading_dataset)
from .metrics import MetricsReport, compute_metrics, confusion_matrix
from .sfa import MsLfConfig, StudentFilter, ms_low_pass, sfa_loss, student_filter
from .trainer import (AblationFlags, DistillConfig, ExpertBundle, TrainRunRecord,
                      distill, distill_logits_baseline, dkd_baseline_loss,
                      evaluate, kd_baseline_loss, total_loss, train_expert,
                      train_supervised)
from .udd import (ScaleSet, accumulate_logits, partition_cells, udd_cell_loss,
                  udd_loss, uncertainty)

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "BackboneSpec", "DimAdapter", "DistillConfig",
    "ExpertBundle", "FeatureTaps", "GradingDataset", "ImbalanceProfile",
    "MappingSpec", "MetricsReport", "MsLfConfig", "ProjectionPair", "ScaleSet",
    "SphereSpace", "SplitConfig", "StudentFilter", "ToyBackbone",
    "TrainRunRecord", "accumulate_logits", "adapt_and_pool", "augment",
    "build_backbone", "build_mapping", "cfa_loss", "compute_metrics",
    "confusion_matrix", "distill", "distill_logits_baseline",
    "dkd_baseline_loss", "evaluate", "feature_alignment_loss",
    "forward_with_taps", "freeze", "kd_baseline_loss", "load_checkpoint",
    "load_image_folder", "logits_map_from_features", "mmd_loss", "ms_low_pass",
    "partition_cells", "project_to_sphere", "reconstruction_loss",
    "save_checkpoint", "sfa_loss", "split", "state_hash", "student_filter",
    "subsample_to_profile", "synth_grading_dataset", "total_loss",
    "train_expert", "train_supervised", "udd_cell_loss", "udd_loss",
    "uncertainty",
]
