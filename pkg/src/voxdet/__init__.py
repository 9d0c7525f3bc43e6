"""Geometry, losses, anchors, matching and evaluation for 3D voxel detection."""

from .geometry import (
    Box3,
    VolumeMeta,
    aspect_term,
    center_distance_sq,
    enclosing_box,
    intersection_volume,
    iou,
    iou_matrix,
    physical_volume_cm3,
    volume,
)
from .losses import (
    BoxParam,
    LossValue,
    batch_loss,
    diou_loss,
    gradient_check,
    loss_components,
    smooth_l1,
    vciou_loss,
)
from .anchors import (
    AnchorConfig,
    AnchorGrid,
    LevelSpec,
    default_stride_schedule,
    feature_shape,
    fit_anchors,
    generate_anchors,
)
from .matching import MatchResult, atss_match, sample_hard_negatives
from .nms import Detection, nms
from .metrics import (
    EvalReport,
    GroundTruth,
    average_precision,
    average_recall,
    evaluate,
    froc,
    match_detections,
    size_stratified,
)
from .annotation import (
    ComponentBox,
    LabelMap,
    NoiseSpec,
    corrupt_boxes,
    mask_to_boxes,
)
from .volio import BoxEntry, ScanBoxes, read_boxes, read_volume, write_boxes, write_volume
from . import errors

__version__ = "0.1.0"
