"""panoslam: pose-free panoramic tracking and surfel mapping.

Spherical camera geometry, consistency-gated pose estimation from 2D-3D
correspondences, depth-inlier map densification, and a synthetic panorama
simulator that makes the whole pipeline verifiable end to end.
"""

from .pipeline import (
    Metrics,
    PipelineConfig,
    RunResult,
    eval_render,
    eval_trajectory,
    load_dataset,
    run_incremental,
)
from .se3 import PoseSE3
from .sphere import EquirectGrid, dir_to_pixel, pixel_to_dir, polar_weight, tangent_error

__all__ = [
    "EquirectGrid",
    "Metrics",
    "PipelineConfig",
    "PoseSE3",
    "RunResult",
    "dir_to_pixel",
    "eval_render",
    "eval_trajectory",
    "load_dataset",
    "pixel_to_dir",
    "polar_weight",
    "run_incremental",
    "tangent_error",
]
