"""Fisheye depth geometry: unified camera model, warping, direct distance estimation.

Submodules:
    camera: unified (mirror plus radial distortion) projection and unprojection.
    ray_cache: per-pixel ray tables with a persistent binary format.
    pose: rigid transforms and trajectories.
    view_synthesis: pixel mapping, bilinear warping and photometric loss.
    head: multi-channel attention output head.
    estimator: multi-level plane-sweep distance estimation.
    synth: analytic ray-cast renderer for ground-truth fixtures.
    metrics: standard depth evaluation metrics.
    io, cli: file formats, dataset layout and the command-line tool.
"""

from __future__ import annotations

from .camera import MeiIntrinsics, project, project_points, unproject, unproject_pixels
from .errors import FisheyeDepthError
from .estimator import EstimatorConfig, SourceView, estimate
from .metrics import MetricReport, compute_metrics
from .pose import RigidTransform, Trajectory, relative_pose
from .ray_cache import RayTable, build_ray_table

__version__ = "0.1.0"

__all__ = [
    "EstimatorConfig",
    "FisheyeDepthError",
    "MeiIntrinsics",
    "MetricReport",
    "RayTable",
    "RigidTransform",
    "SourceView",
    "Trajectory",
    "build_ray_table",
    "compute_metrics",
    "estimate",
    "project",
    "project_points",
    "relative_pose",
    "unproject",
    "unproject_pixels",
]
