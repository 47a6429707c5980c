"""Algorithmic core of a CenterPoint-style lidar 3D detector.

Voxelisation, rotated-box geometry, budgeted target assignment, test-time
augmentation, box fusion, GT-paste augmentation and AP/APH evaluation.
"""

__version__ = "0.1.0"

from .geom import Box3D, RigidTransform, bev_iou, iou_3d, transform_box, wrap_angle  # noqa: E402
from .structures import Detection, GroundTruthObject  # noqa: E402

__all__ = [
    "Box3D",
    "Detection",
    "GroundTruthObject",
    "RigidTransform",
    "bev_iou",
    "iou_3d",
    "transform_box",
    "wrap_angle",
    "__version__",
]
