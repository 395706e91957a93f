"""Uncertainty propagation and multi-camera inverse-variance fusion.

Translation uncertainty is derived from the reprojection error and the
camera focal length; per-camera distance estimates are then combined by a
Gaussian weighting scheme in which low-sigma cameras dominate. Full-pose
fusion extends the same weighting to per-axis translations and a weighted
quaternion chordal mean for rotation.

Note on the focal-length terms: the published propagation uses f_x in all
three axes (f_x twice under the root of the depth term). That form is
implemented as the default; ``use_fy_correction=True`` substitutes f_y in
the y and depth terms. With near-square pixels the two agree closely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    FrameMismatch,
    NoEstimates,
    NonPositiveSigma,
    ZeroDistance,
)
from .geometry import CameraModel, RigidTransform, Rotation

if TYPE_CHECKING:
    from .pose import PoseEstimate

SIGMA_FLOOR_MM = 1e-9


@dataclass(frozen=True)
class DistanceEstimate:
    """One camera's tag distance with its standard deviation."""

    camera_id: str
    distance: float
    sigma: float

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("distance must be positive")
        if self.sigma <= 0:
            raise NonPositiveSigma("sigma must be strictly positive")


@dataclass(frozen=True)
class FusedScalar:
    """Inverse-variance weighted distance across cameras."""

    distance: float
    sigma: float
    weights: dict[str, float]


@dataclass(frozen=True)
class FusedPose:
    """Full 6-DoF fusion result in the world frame."""

    pose: RigidTransform
    sigma_t: np.ndarray
    rotation_dispersion_deg: float
    camera_count: int


def propagate_uncertainty(e_proj: float, t, cam: CameraModel,
                          use_fy_correction: bool = False) -> np.ndarray:
    """Translation standard deviations from the reprojection error.

    sigma_x = e * t_z / f_x, sigma_y = e * t_z / f_x (published form; f_y
    with the correction switch), sigma_z = e * t_z / sqrt(f_x^2 + f_x^2)
    (f_y^2 with the switch).
    """
    if e_proj < 0:
        raise ValueError("reprojection error must be non-negative")
    t = np.asarray(t, dtype=np.float64)
    tz = float(t[2])
    if tz <= 0:
        raise ValueError("depth must be positive for uncertainty propagation")
    fy = cam.fy if use_fy_correction else cam.fx
    sx = e_proj * tz / cam.fx
    sy = e_proj * tz / fy
    sz = e_proj * tz / math.sqrt(cam.fx ** 2 + fy ** 2)
    return np.array([sx, sy, sz])


def distance_sigma(t, sigma_t) -> tuple[float, float]:
    """Distance d = ||t|| and its first-order standard deviation.

    sigma_d = sqrt(sum_i (t_i / d * sigma_i)^2), the propagation of the
    Euclidean norm through independent per-axis errors.

    Raises:
        ZeroDistance: if ||t|| is zero.
    """
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(sigma_t, dtype=np.float64)
    d = float(np.linalg.norm(t))
    if d == 0.0:
        raise ZeroDistance("distance sigma undefined at ||t|| = 0")
    sigma_d = float(np.sqrt(np.sum((t / d * s) ** 2)))
    return d, sigma_d


def fuse_distances(estimates: Sequence[DistanceEstimate]) -> FusedScalar:
    """Combine per-camera distances by inverse-variance weighting.

    d_fused = sum(d_j / s_j^2) / sum(1 / s_j^2);
    sigma_fused = sqrt(1 / sum(1 / s_j^2)).

    Raises:
        EmptyInput: no estimates.
        NonPositiveSigma: any sigma <= 0.
    """
    if len(estimates) == 0:
        raise EmptyInput("no distance estimates to fuse")
    sigmas = np.array([e.sigma for e in estimates])
    if np.any(sigmas <= 0):
        raise NonPositiveSigma("all sigmas must be strictly positive")
    d = np.array([e.distance for e in estimates])
    w = 1.0 / sigmas ** 2
    wsum = float(w.sum())
    fused = float((w @ d) / wsum)
    sigma = math.sqrt(1.0 / wsum)
    weights = {e.camera_id: float(wi / wsum) for e, wi in zip(estimates, w)}
    return FusedScalar(distance=fused, sigma=sigma, weights=weights)


def rotate_sigma(rotation: Rotation, sigma: np.ndarray) -> np.ndarray:
    """Express per-axis standard deviations in a rotated frame.

    Treats the sigmas as a diagonal covariance, rotates it, and returns the
    square root of the new diagonal.
    """
    R = rotation.as_matrix()
    return np.sqrt((R ** 2) @ (np.asarray(sigma, dtype=np.float64) ** 2))


def chordal_mean_rotation(rotations: Sequence[Rotation],
                          weights: np.ndarray) -> Rotation:
    """Weighted quaternion chordal mean.

    Uses the principal eigenvector of the weighted outer-product
    accumulator, which is invariant to per-quaternion sign flips.
    """
    A = np.zeros((4, 4))
    for rot, w in zip(rotations, weights):
        q = rot.q
        A += w * np.outer(q, q)
    vals, vecs = np.linalg.eigh(A)
    return Rotation(vecs[:, np.argmax(vals)])


@dataclass(frozen=True)
class WorldPoseHypothesis:
    """One camera's contribution mapped into the world frame."""

    pose: RigidTransform
    sigma_t: np.ndarray
    sigma_distance: float


def fuse_world_hypotheses(hypotheses: Sequence[WorldPoseHypothesis]) -> FusedPose:
    """Fuse world-frame pose hypotheses (the shared 6-DoF fusion core).

    Translation axes are fused independently by inverse variance; rotations
    by a chordal mean weighted with 1/sigma_distance^2. Sigmas are floored
    at SIGMA_FLOOR_MM so exact (zero-noise) estimates fuse as plain means.
    """
    if len(hypotheses) == 0:
        raise NoEstimates("no pose hypotheses to fuse")
    m = len(hypotheses)
    ts = np.array([h.pose.translation for h in hypotheses])
    sig = np.array([np.maximum(h.sigma_t, SIGMA_FLOOR_MM) for h in hypotheses])
    w_axis = 1.0 / sig ** 2
    wsum = w_axis.sum(axis=0)
    t_fused = (w_axis * ts).sum(axis=0) / wsum
    sigma_fused = np.sqrt(1.0 / wsum)

    w_rot = np.array([1.0 / max(h.sigma_distance, SIGMA_FLOOR_MM) ** 2
                      for h in hypotheses])
    w_rot = w_rot / w_rot.sum()
    rot = chordal_mean_rotation([h.pose.rotation for h in hypotheses], w_rot)
    disp = sum(w * math.degrees(rot.angle_to(h.pose.rotation))
               for h, w in zip(hypotheses, w_rot))
    return FusedPose(
        pose=RigidTransform(rot, t_fused),
        sigma_t=sigma_fused,
        rotation_dispersion_deg=float(disp),
        camera_count=m,
    )


def fuse_poses(estimates: Sequence["PoseEstimate"],
               cameras: Mapping[str, CameraModel]) -> FusedPose:
    """Fuse same-tag estimates from multiple cameras into one world pose.

    Each estimate's tag->camera pose is mapped through its camera extrinsic
    into the world frame; its camera-frame sigmas rotate along.

    Args:
        estimates: per-camera estimates of the same tag in the same frame.
        cameras: camera registry providing the camera->world edges.

    Raises:
        NoEstimates: empty input.
        FrameMismatch: mixed tags/frames, or an unknown camera.
    """
    if len(estimates) == 0:
        raise NoEstimates("no pose estimates to fuse")
    tag_ids = {e.tag_id for e in estimates}
    frame_ids = {e.frame_id for e in estimates}
    if len(tag_ids) != 1 or len(frame_ids) != 1:
        raise FrameMismatch(f"mixed tags {tag_ids} or frames {frame_ids}")
    hypotheses = []
    for est in estimates:
        cam = cameras.get(est.camera_id)
        if cam is None:
            raise FrameMismatch(f"unknown camera {est.camera_id!r}")
        world_pose = cam.extrinsic.compose(est.pose)
        sigma_world = rotate_sigma(cam.extrinsic.rotation, est.sigma_t)
        hypotheses.append(WorldPoseHypothesis(world_pose, sigma_world,
                                              est.sigma_distance))
    return fuse_world_hypotheses(hypotheses)
