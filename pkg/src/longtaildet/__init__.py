"""Long-tail object detection pipeline toolkit.

Framework-independent building blocks: class-balance sampling, hard-negative
anchor sampling with target-ringed negative regions, duck-fill and mix-up
augmentation, multi-level RoI extraction with analytic gradients, weight
snapshot averaging, staged learning-rate schedules, and test-time
augmentation box fusion.
"""

from .geometry import BBox, center_distance, diag_norm, iou, nms

__all__ = ["BBox", "iou", "center_distance", "diag_norm", "nms"]

__version__ = "0.1.0"
