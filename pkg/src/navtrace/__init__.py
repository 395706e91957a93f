"""navtrace: multi-camera optical-tag tracking and fusion engine."""

from .calibration import CalibrationReport, CheckerboardObservation, calibrate
from .errors import NavtraceError
from .frames import (
    HeadPose,
    CoilPose,
    SceneLayout,
    SphereHead,
    TargetEstimate,
    estimate_target,
    solve_coil_pose,
    solve_head_pose,
)
from .fusion import (
    DistanceEstimate,
    FusedPose,
    FusedScalar,
    distance_sigma,
    fuse_distances,
    fuse_poses,
    propagate_uncertainty,
)
from .geometry import (
    CameraModel,
    Pixel,
    RigidTransform,
    Rotation,
    Vec3,
    project,
    transform_point,
    undistort,
)
from .pipeline import FramePipeline, PipelineConfig
from .pose import PoseEstimate, TagDetection, TagSpec, solve_tag_pose
from .sim import SimConfig, default_scene_layout, monte_carlo_pose_oracle, simulate

__version__ = "0.1.0"

__all__ = [
    "NavtraceError",
    "Rotation",
    "RigidTransform",
    "CameraModel",
    "Vec3",
    "Pixel",
    "project",
    "undistort",
    "transform_point",
    "TagSpec",
    "TagDetection",
    "PoseEstimate",
    "solve_tag_pose",
    "CheckerboardObservation",
    "CalibrationReport",
    "calibrate",
    "DistanceEstimate",
    "FusedScalar",
    "FusedPose",
    "propagate_uncertainty",
    "distance_sigma",
    "fuse_distances",
    "fuse_poses",
    "SceneLayout",
    "SphereHead",
    "HeadPose",
    "CoilPose",
    "TargetEstimate",
    "solve_head_pose",
    "solve_coil_pose",
    "estimate_target",
    "SimConfig",
    "simulate",
    "default_scene_layout",
    "monte_carlo_pose_oracle",
    "FramePipeline",
    "PipelineConfig",
    "__version__",
]
