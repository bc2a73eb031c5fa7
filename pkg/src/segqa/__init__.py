"""Label QA toolkit for multi-organ volumetric segmentation.

Detects probable label errors in model predictions by combining cross-model
inconsistency, per-organ uncertainty and inter-organ overlap into attention
maps, then drives a prioritized human-in-the-loop annotation campaign with
component-wise quality metrics.
"""

from .campaign import (
    CampaignState,
    CaseEntry,
    LoopPolicy,
    WorkloadEstimate,
    estimate_workload,
    mark_case,
    rank_cases,
    run_loop,
    select_for_revision,
    simulate_revision,
    stopping_check,
)
from .detect import (
    AttentionMap,
    DetectionConfig,
    binary_entropy,
    build_attention,
    inconsistency_map,
    overlap_map,
    uncertainty_map,
)
from .ensemble import ensemble_label, mean_soft
from .nifti import NiftiFormatError, read_volume, write_volume
from .regions import (
    Component,
    ConfusionCounts,
    MetricsReport,
    componentwise_metrics,
    connected_components,
    dsc,
    dsc_matrix,
    error_region,
    false_positive_scan,
)
from .volume import (
    AlignmentError,
    LabelVolume,
    OrganLabelMap,
    PredictionSet,
    SoftPrediction,
    VolumeGrid,
    binarize,
    labels_from_soft,
    physical_volume,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "AttentionMap",
    "CampaignState",
    "CaseEntry",
    "Component",
    "ConfusionCounts",
    "DetectionConfig",
    "LabelVolume",
    "LoopPolicy",
    "MetricsReport",
    "NiftiFormatError",
    "OrganLabelMap",
    "PredictionSet",
    "SoftPrediction",
    "VolumeGrid",
    "WorkloadEstimate",
    "binarize",
    "binary_entropy",
    "build_attention",
    "componentwise_metrics",
    "connected_components",
    "dsc",
    "dsc_matrix",
    "ensemble_label",
    "error_region",
    "estimate_workload",
    "false_positive_scan",
    "inconsistency_map",
    "labels_from_soft",
    "mark_case",
    "mean_soft",
    "overlap_map",
    "physical_volume",
    "rank_cases",
    "read_volume",
    "run_loop",
    "select_for_revision",
    "simulate_revision",
    "stopping_check",
    "uncertainty_map",
    "write_volume",
]
