"""Longitudinal deformable registration with unsupervised keypoint
constraints, exercised end-to-end on synthetic breast phantoms."""

__version__ = "0.1.0"

from .grid_field import (
    DeformationField,
    field_from_keypoints,
    grad_penalty,
    invert_field,
    jacobian_determinant,
    ngjd,
    resample_field,
    warp,
)
from .keypoints import HeatmapStack, KeypointSet, nms_peaks, render_heatmaps, soft_argmax
from .losses import (
    LossWeights,
    loss_pyramid_similarity,
    loss_structural_keypoint,
    loss_total,
    loss_volume_preserving,
)
from .metrics import MetricReport, delta_v, dice, evaluate_pair, landmark_error
from .phantom import PhantomConfig, StudyPair, StudySide, generate_pair, load_study, save_study
from .prm import PrmFeature, prm, prm_feature_vector
from .segment import keypoint_filter_components, otsu_threshold, threshold_segment, yen_threshold
from .volume import Volume

__all__ = [
    "DeformationField",
    "HeatmapStack",
    "KeypointSet",
    "LossWeights",
    "MetricReport",
    "PhantomConfig",
    "PrmFeature",
    "StudyPair",
    "StudySide",
    "Volume",
    "delta_v",
    "dice",
    "evaluate_pair",
    "field_from_keypoints",
    "generate_pair",
    "grad_penalty",
    "invert_field",
    "jacobian_determinant",
    "keypoint_filter_components",
    "landmark_error",
    "load_study",
    "loss_pyramid_similarity",
    "loss_structural_keypoint",
    "loss_total",
    "loss_volume_preserving",
    "ngjd",
    "nms_peaks",
    "otsu_threshold",
    "prm",
    "prm_feature_vector",
    "render_heatmaps",
    "resample_field",
    "save_study",
    "soft_argmax",
    "threshold_segment",
    "warp",
    "yen_threshold",
]
