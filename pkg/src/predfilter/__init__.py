"""Prediction filtering for semantic segmentation.

Restrict a segmentation model's per-pixel argmax to the classes an image-level
classifier believes are present, and measure what that does.
"""
from .errors import (
    BadMagic,
    ConfigError,
    DimensionMismatch,
    EmptyLoss,
    EmptyReport,
    FormatError,
    ManifestError,
    MissingInput,
    NonFiniteValue,
    PredFilterError,
    PredHasIgnore,
    TruncatedPayload,
    UnsupportedMaxval,
)
from .filtering import (
    INFINITE,
    Fallback,
    FilterConfig,
    SoftFilterConfig,
    allowed_set_from_classifier,
    argmax_predict,
    filtered_predict,
    masked_cross_entropy,
    oracle_filter_predict,
    soft_filter_predict,
)
from .metrics import (
    ConfusionMatrix,
    Grouping,
    accumulate_confusion,
    average_precision,
    iou_from_confusion,
    mnet,
    multilabel_metrics,
    subgroup_eval,
    threshold_sweep,
)
from .synth import ScenarioConfig, generate_scenario, perfect_classifier_scores
from .tensor_io import (
    IGNORE,
    DatasetManifest,
    load_manifest,
    presence_from_label_map,
    read_label_map,
    read_logits,
    write_label_map,
    write_logits,
)

__version__ = "0.1.0"
