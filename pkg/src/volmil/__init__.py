"""Weakly-supervised volumetric multiple-instance learning engine.

Pipeline: synthetic cohort generation (or external volumes), tissue
segmentation, 2D/3D patch grids, pluggable feature encoders, gated-attention
aggregation with a binary risk head, integrated-gradients attribution, and
cohort-level statistical evaluation. Everything is deterministic under a seed
and verifiable end-to-end at desk scale.
"""

from .config import RunConfig, parse_config
from .encoder import AdapterParams, EncoderSpec, adapter_forward, encode_bag, encode_patch, gelu
from .evaluate import (
    CohortResult,
    SplitPlan,
    association_stats,
    auc_score,
    classification_metrics,
    cross_cohort_validate,
    cross_validate,
    group_difference,
    km_curve,
    median_risk_groups,
    partial_volume_experiment,
    plane_variability,
    repeated_cross_validate,
    stratified_splits,
    survival_analysis,
)
from .interpret import (
    HeatmapVolume,
    IGResult,
    build_heatmap,
    ig_group_assignment,
    integrated_gradients,
    normalize_ig,
)
from .mil import (
    MILModel,
    Prediction,
    TrainConfig,
    adamw_step,
    attention_scores,
    bag_forward,
    cosine_lr,
    init_model,
    loss_and_gradients,
    model_from_checkpoint,
    model_to_checkpoint,
    predict,
    train,
)
from .phantom import (
    CellTypeSpec,
    ClassSpec,
    Spheroid,
    SurvivalSpec,
    default_cell_types,
    default_class_specs,
    generate_classification_cohort,
    generate_survival_cohort,
    rasterize_spheroid,
    sample_spheroid,
)
from .preprocess import (
    MaskStack,
    NormParams,
    PatchGrid,
    SegParams,
    build_patch_grid,
    extract_patch,
    resolve_norm,
    segment_volume,
)
from .store import (
    Checkpoint,
    CohortManifest,
    FeatureBag,
    ManifestRecord,
    Volume,
    read_checkpoint,
    read_feature_bag,
    read_manifest,
    read_volume,
    write_checkpoint,
    write_feature_bag,
    write_manifest,
    write_volume,
)

__version__ = "0.1.0"
