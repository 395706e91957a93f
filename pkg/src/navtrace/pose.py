"""Per-camera, per-tag pose solving from corner detections.

The solver minimizes the sum of squared pixel residuals between detected
corners and corners predicted by projecting the tag geometry, initialized
from a planar-homography decomposition and refined by damped least squares
over the 6 pose parameters. Both branches of the planar two-fold ambiguity
are refined; the lower-residual branch wins and near-ties are flagged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np

from . import fusion
from .errors import BadCorners, Diverged
from .geometry import (
    CameraModel,
    RigidTransform,
    Rotation,
    project_points,
    project_points_pose_jacobian,
    undistort,
)

AMBIGUITY_RATIO = 1.5
REFINE_REL_TOL = 1e-12
REFINE_MAX_ITER = 50
DAMPING_INIT = 1e-3
DAMPING_UP = 10.0
DAMPING_DOWN = 0.1


@dataclass(frozen=True)
class TagSpec:
    """Physical tag geometry.

    Canonical corners live in the tag frame: z = 0 plane, tag center at the
    origin, +z out of the printed face. Corner order is counter-clockwise
    viewed from the front, starting at (-s/2, -s/2):

        0: (-s/2, -s/2)   1: (+s/2, -s/2)   2: (+s/2, +s/2)   3: (-s/2, +s/2)

    Detections must list their pixels in this same order.
    """

    tag_id: int
    side_length: float = 24.0

    def __post_init__(self):
        if self.side_length <= 0:
            raise ValueError("tag side length must be positive")

    def corners(self) -> np.ndarray:
        h = 0.5 * self.side_length
        return np.array([
            [-h, -h, 0.0],
            [h, -h, 0.0],
            [h, h, 0.0],
            [-h, h, 0.0],
        ])


@dataclass(frozen=True)
class TagDetection:
    """Four corner pixels of one tag in one camera frame."""

    camera_id: str
    frame_id: int
    timestamp_ms: float
    tag_id: int
    corners: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64)
        if c.shape != (4, 2):
            raise ValueError(f"corners must be (4, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite corner coordinates")
        object.__setattr__(self, "corners", c)
        self.corners.setflags(write=False)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def corners_convex(corners: np.ndarray) -> bool:
    """Whether four corners form a convex quadrilateral in listed order."""
    c = np.asarray(corners, dtype=np.float64)
    signs = []
    for i in range(4):
        a = c[(i + 1) % 4] - c[i]
        b = c[(i + 2) % 4] - c[(i + 1) % 4]
        signs.append(a[0] * b[1] - a[1] * b[0])
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)


@dataclass(frozen=True)
class PoseEstimate:
    """A solved tag pose (tag frame -> camera frame) with uncertainty."""

    camera_id: str
    frame_id: int
    tag_id: int
    pose: RigidTransform
    e_proj: float
    sigma_t: np.ndarray
    distance: float
    sigma_distance: float
    ambiguous: bool = False
    alternate: RigidTransform | None = None
    alternate_e_proj: float | None = None

    def __post_init__(self):
        s = np.asarray(self.sigma_t, dtype=np.float64)
        object.__setattr__(self, "sigma_t", s)
        if self.e_proj < 0 or np.any(s < 0) or self.sigma_distance < 0:
            raise ValueError("error and sigma fields must be non-negative")
        t = self.pose.translation
        if t[2] <= 0:
            raise ValueError("tag must lie in front of the camera (t_z > 0)")
        if abs(self.distance - float(np.linalg.norm(t))) > 1e-9:
            raise ValueError("distance must equal the translation norm")


def _homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Homography mapping (N, 2) src to (N, 2) dst, Hartley-normalized DLT."""

    def normalizer(pts):
        mean = pts.mean(axis=0)
        scale = math.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
        T = np.array([
            [scale, 0.0, -scale * mean[0]],
            [0.0, scale, -scale * mean[1]],
            [0.0, 0.0, 1.0],
        ])
        return T

    Ts = normalizer(src)
    Td = normalizer(dst)
    s = (np.column_stack([src, np.ones(len(src))]) @ Ts.T)[:, :2]
    d = (np.column_stack([dst, np.ones(len(dst))]) @ Td.T)[:, :2]
    n = len(src)
    A = np.zeros((2 * n, 9))
    for i in range(n):
        X, Y = s[i]
        u, v = d[i]
        A[2 * i] = [-X, -Y, -1, 0, 0, 0, u * X, u * Y, u]
        A[2 * i + 1] = [0, 0, 0, -X, -Y, -1, v * X, v * Y, v]
    _, _, vt = np.linalg.svd(A)
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ H @ Ts
    return H / H[2, 2]


def _pose_from_homography(H: np.ndarray) -> RigidTransform:
    """Decompose a tag-plane-to-normalized-image homography into (R, t)."""
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1, r2, t = lam * h1, lam * h2, lam * h3
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    r3 = np.cross(r1, r2)
    M = np.stack([r1, r2, r3], axis=1)
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return RigidTransform(Rotation.from_matrix(R), t)


def _flipped_hypothesis(pose: RigidTransform) -> RigidTransform | None:
    """Second branch of the planar ambiguity: tag normal mirrored about the ray."""
    t = pose.translation
    v = t / np.linalg.norm(t)
    n = pose.rotation.apply(np.array([0.0, 0.0, 1.0]))
    n_ref = 2.0 * float(n @ v) * v - n
    axis = np.cross(n, n_ref)
    s = np.linalg.norm(axis)
    if s < 1e-9:  # frontal view: both branches coincide
        return None
    angle = math.atan2(s, float(n @ n_ref))
    flip = Rotation.from_axis_angle(axis / s, angle)
    return RigidTransform(flip.compose(pose.rotation), t)


def _residuals(cam: CameraModel, obj: np.ndarray, observed: np.ndarray,
               pose: RigidTransform) -> np.ndarray:
    pts_cam = pose.apply_many(obj)
    if np.any(pts_cam[:, 2] <= 0):
        return np.full(2 * len(obj), 1e6)
    px = project_points(pts_cam, cam.fx, cam.fy, cam.cx, cam.cy, cam.distortion)
    return (px - observed).ravel()


def _jacobian_raw(d_pcam: np.ndarray, rotated: np.ndarray) -> np.ndarray:
    n = rotated.shape[0]
    # d(pixel)/d(rot increment) = d_pcam @ (-skew(R p)), vectorized over corners
    skews = np.zeros((n, 3, 3))
    skews[:, 0, 1] = rotated[:, 2]
    skews[:, 0, 2] = -rotated[:, 1]
    skews[:, 1, 0] = -rotated[:, 2]
    skews[:, 1, 2] = rotated[:, 0]
    skews[:, 2, 0] = rotated[:, 1]
    skews[:, 2, 1] = -rotated[:, 0]
    J = np.empty((n, 2, 6))
    J[:, :, :3] = d_pcam @ skews
    J[:, :, 3:] = d_pcam
    return J.reshape(2 * n, 6)


def _jacobian(cam: CameraModel, obj: np.ndarray,
              pose: RigidTransform) -> np.ndarray:
    pts_cam = pose.apply_many(obj)
    _, d_pcam = project_points_pose_jacobian(pts_cam, cam.fx, cam.fy, cam.cx,
                                             cam.cy, cam.distortion)
    return _jacobian_raw(d_pcam, pts_cam - pose.translation)


def _rodrigues(rv: np.ndarray) -> np.ndarray:
    """Rotation matrix of a small axis-angle increment."""
    angle = math.sqrt(float(rv @ rv))
    if angle < 1e-14:
        return np.eye(3)
    k = rv / angle
    K = np.array([[0.0, -k[2], k[1]],
                  [k[2], 0.0, -k[0]],
                  [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def _refine(cam: CameraModel, obj: np.ndarray, observed: np.ndarray,
            init: RigidTransform) -> tuple[RigidTransform, float]:
    """Levenberg-damped least squares over the 6 pose parameters.

    Axis-angle increments compose onto the rotation (matrix form inside the
    loop; the returned Rotation renormalizes). Stops when the relative cost
    change drops below REFINE_REL_TOL or after REFINE_MAX_ITER iterations.
    """
    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    dist = cam.distortion
    R = init.rotation.as_matrix()
    t = init.translation.copy()
    eye6 = np.eye(6)

    def evaluate(Rm, tv):
        # residual and point jacobian share one projection pass
        pts = obj @ Rm.T + tv
        if np.any(pts[:, 2] <= 0):
            return None, None, None
        px, d_pcam = project_points_pose_jacobian(pts, fx, fy, cx, cy, dist)
        return (px - observed).ravel(), pts, d_pcam

    r, pts, d_pcam = evaluate(R, t)
    if r is None:
        raise Diverged("initialization places the tag behind the camera")
    cost = float(r @ r)
    lam = DAMPING_INIT
    for _ in range(REFINE_MAX_ITER):
        J = _jacobian_raw(d_pcam, pts - t)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(25):
            try:
                delta = np.linalg.solve(H + lam * eye6, -g)
            except np.linalg.LinAlgError:
                lam *= DAMPING_UP
                continue
            R_new = _rodrigues(delta[:3]) @ R
            t_new = t + delta[3:]
            r_new, pts_new, d_new = evaluate(R_new, t_new)
            if r_new is not None:
                cost_new = float(r_new @ r_new)
                if math.isfinite(cost_new) and cost_new <= cost:
                    improved = True
                    break
            lam *= DAMPING_UP
        if not improved:
            break
        rel_change = (cost - cost_new) / max(cost, 1e-300)
        R, t, r, pts, d_pcam, cost = R_new, t_new, r_new, pts_new, d_new, cost_new
        lam = max(lam * DAMPING_DOWN, 1e-12)
        if rel_change < REFINE_REL_TOL:
            break
    if not math.isfinite(cost):
        raise Diverged("pose refinement produced a non-finite cost")
    return RigidTransform(Rotation.from_matrix(R), t), cost


def reprojection_error(cam: CameraModel, spec: TagSpec, det: TagDetection,
                       pose: RigidTransform) -> float:
    """Mean Euclidean pixel distance over the four corners."""
    pts_cam = pose.apply_many(spec.corners())
    px = project_points(pts_cam, cam.fx, cam.fy, cam.cx, cam.cy, cam.distortion)
    return float(np.mean(np.linalg.norm(px - det.corners, axis=1)))


def pose_cost_gradient(cam: CameraModel, spec: TagSpec, det: TagDetection,
                       pose: RigidTransform) -> tuple[float, np.ndarray]:
    """Squared-residual cost and its analytic gradient in the 6 pose parameters.

    Parameter order matches the solver's update: axis-angle increment
    (left-composed onto the rotation), then translation.
    """
    obj = spec.corners()
    r = _residuals(cam, obj, det.corners, pose)
    J = _jacobian(cam, obj, pose)
    return float(r @ r), 2.0 * (J.T @ r)


def solve_tag_pose(cam: CameraModel, spec: TagSpec, det: TagDetection,
                   use_fy_correction: bool = False) -> PoseEstimate:
    """Solve the tag pose seen by one camera from one detection.

    Args:
        cam: calibrated camera (intrinsics + distortion used; the extrinsic
            plays no role here).
        spec: physical tag geometry matching the detection's tag_id.
        det: four corner pixels in the spec's corner order.
        use_fy_correction: forwarded to the uncertainty propagation.

    Returns:
        The lower-residual local minimizer with reprojection error and
        translation uncertainty filled in. When the two ambiguity branches
        land within a factor 1.5 in reprojection error, the estimate is
        flagged ``ambiguous`` and carries the alternate pose.

    Raises:
        BadCorners: corner order/convexity violation or tag_id mismatch.
        Diverged: refinement failed from both initializations.
    """
    if det.tag_id != spec.tag_id:
        raise BadCorners(f"detection tag {det.tag_id} does not match spec {spec.tag_id}")
    if not corners_convex(det.corners):
        raise BadCorners("detected corners are not a convex quadrilateral")

    normalized = np.array([undistort(cam, c) for c in det.corners])
    obj = spec.corners()
    H = _homography_dlt(obj[:, :2], normalized)
    init = _pose_from_homography(H)

    best, _ = _refine(cam, obj, det.corners, init)
    best_e = reprojection_error(cam, spec, det, best)
    alt_pose = None
    alt_e = None
    flipped = _flipped_hypothesis(best)
    if flipped is not None:
        try:
            other, _ = _refine(cam, obj, det.corners, flipped)
        except Diverged:
            other = None
        if other is not None and other.translation[2] > 0:
            other_e = reprojection_error(cam, spec, det, other)
            if other_e < best_e:
                best, best_e, other, other_e = other, other_e, best, best_e
            # distinct second minimum only if the poses actually differ
            if best.rotation.angle_to(other.rotation) > 1e-3:
                alt_pose = other
                alt_e = other_e

    e_proj = best_e
    ambiguous = alt_e is not None and alt_e <= AMBIGUITY_RATIO * e_proj + 1e-12
    if not ambiguous:
        alt_pose, alt_e = None, None

    t = best.translation
    sigma_t = fusion.propagate_uncertainty(e_proj, t, cam,
                                           use_fy_correction=use_fy_correction)
    distance, sigma_d = fusion.distance_sigma(t, sigma_t)
    return PoseEstimate(
        camera_id=det.camera_id,
        frame_id=det.frame_id,
        tag_id=det.tag_id,
        pose=best,
        e_proj=e_proj,
        sigma_t=sigma_t,
        distance=distance,
        sigma_distance=sigma_d,
        ambiguous=ambiguous,
        alternate=alt_pose,
        alternate_e_proj=alt_e,
    )


# --- detection stream records -------------------------------------------
#
# One JSON object per line, the ingestion seam where a real detector plugs
# in. Fields, in order: type ("detection"), camera_id, frame_id,
# timestamp_ms (milliseconds), tag_id, corners (4 x [u, v] pixels in
# TagSpec corner order), confidence (0..1).


def detection_to_record(det: TagDetection) -> dict:
    return {
        "type": "detection",
        "camera_id": det.camera_id,
        "frame_id": det.frame_id,
        "timestamp_ms": det.timestamp_ms,
        "tag_id": det.tag_id,
        "corners": [[float(u), float(v)] for u, v in det.corners],
        "confidence": det.confidence,
    }


def detection_from_record(rec: dict) -> TagDetection:
    if rec.get("type") != "detection":
        raise ValueError(f"not a detection record: {rec.get('type')!r}")
    return TagDetection(
        camera_id=str(rec["camera_id"]),
        frame_id=int(rec["frame_id"]),
        timestamp_ms=float(rec["timestamp_ms"]),
        tag_id=int(rec["tag_id"]),
        corners=np.array(rec["corners"], dtype=np.float64),
        confidence=float(rec.get("confidence", 1.0)),
    )


def write_detections(detections: Iterable[TagDetection], fh: IO[str]) -> None:
    for det in detections:
        fh.write(json.dumps(detection_to_record(det)) + "\n")


def read_detections(fh: IO[str]) -> Iterator[TagDetection]:
    for line in fh:
        line = line.strip()
        if line:
            yield detection_from_record(json.loads(line))
