"""Modality-flexible 3D masked-autoencoder pretraining for brain imaging.

A single shared transformer accepts any nonempty subset of {T1, T2, FLAIR,
PET} volumes, with missing modalities zeroed and attention-blocked.
Pretraining combines masked reconstruction, reciprocal cross-modal
EMA-teacher distillation, and an atlas-guided curriculum that biases
masking toward disease-relevant anatomy. A finetuning and evaluation
harness covers modality-robustness and label-efficiency protocols on
synthetic cohorts.
"""

__version__ = "0.1.0"

from .augment import AugmentConfig, augment
from .cohort import CohortManifest, SubjectEntry, SubjectRecord
from .masking import (
    UNIFORM,
    AtlasMembership,
    CurriculumConfig,
    ImportanceState,
    MaskingConfig,
    MaskPlan,
    allocate_visible_budget,
    build_mask_plan,
    build_membership_matrix,
    combine_scores,
    dynamic_scores_from_attention,
    gumbel_top_k_mask,
    mask_probabilities,
    region_weights,
    static_scores,
    temperature_at,
)
from .metrics import (
    MetricsReport,
    compute_classification_metrics,
    compute_regression_metrics,
)
from .modalities import (
    DESIGNATED_COMBINATIONS,
    FLAIR,
    MODALITIES,
    MRI_MODALITIES,
    PET,
    T1,
    T2,
    combination_tag,
    modality_dropout,
    sample_modality_subset,
)
from .model import (
    MaskedAutoencoder,
    ModelConfig,
    MultiModalEncoder,
    TaskHead,
    desk_preset,
    make_teacher,
    paper_preset,
    positional_embedding_3d,
)
from .objectives import (
    RCMDHeads,
    ReconstructionBatch,
    ema_update,
    group_pool,
    mae_loss,
    momentum_at,
    per_patch_normalize,
    rcmd_loss,
    total_loss,
)
from .pretrain import PretrainRun, TrainConfig, lambda_at, lr_at, run_pretraining
from .finetune import FinetuneConfig, FinetunedModel, finetune, load_pretrained_encoder
from .evaluate import (
    evaluate_split,
    export_attention_map,
    label_efficiency_sweep,
    robustness_sweep,
)
from .synthetic import SyntheticCohortConfig, generate_synthetic_cohort
from .volumes import (
    PatchGrid,
    load_atlas,
    load_volume,
    normalize_volume,
    partition_patches,
    unpartition_patches,
    write_atlas,
    write_volume,
)
