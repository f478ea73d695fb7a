"""SORT multi-object tracking over tiny matrices, with a scaling benchmark."""

from .assignment import AssignmentResult, solve, solve_rectangular_padded
from .boxes import BBox, bbox_to_z, iou, x_to_bbox
from .kalman import KalmanModel, KalmanState
from .tracker import FrameDetections, TrackerConfig, TrackerSet, associate, run_sequence

__version__ = "0.1.0"

__all__ = [
    "AssignmentResult",
    "BBox",
    "FrameDetections",
    "KalmanModel",
    "KalmanState",
    "TrackerConfig",
    "TrackerSet",
    "associate",
    "bbox_to_z",
    "iou",
    "run_sequence",
    "solve",
    "solve_rectangular_padded",
    "x_to_bbox",
]
