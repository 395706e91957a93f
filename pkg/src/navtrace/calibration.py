"""Intrinsic calibration from planar checkerboard observations.

Classic planar-target pipeline: a homography per view, closed-form
intrinsics from absolute-conic constraints (zero skew), per-view pose
recovery, then joint damped-least-squares refinement of intrinsics,
distortion, and all board poses. The refinement eliminates the per-view
pose blocks by a Schur complement, so large view counts stay cheap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .errors import DegenerateViews, DivergedRefinement, TooFewViews
from .geometry import (
    CameraModel,
    RigidTransform,
    Rotation,
    project_points,
    project_points_jacobian,
    skew,
)

MIN_VIEWS = 3
NORMAL_SPAN_MIN_DEG = 5.0
DAMPING_INIT = 1e-3
DAMPING_UP = 10.0
DAMPING_DOWN = 0.1
REL_TOL = 1e-10
MAX_ITER = 100


@dataclass(frozen=True)
class CheckerboardObservation:
    """Detected inner corners of one board view, row-major board order."""

    view_id: str
    rows: int
    cols: int
    square_size: float
    corners: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64)
        expected = self.rows * self.cols
        if c.shape != (expected, 2):
            raise ValueError(
                f"view {self.view_id}: expected {expected} corners, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError(f"view {self.view_id}: non-finite corners")
        object.__setattr__(self, "corners", c)
        self.corners.setflags(write=False)

    def board_points(self) -> np.ndarray:
        """Board-frame corner coordinates (z = 0), row-major to match corners."""
        rows, cols, s = self.rows, self.cols, self.square_size
        pts = np.zeros((rows * cols, 3))
        for r in range(rows):
            for c in range(cols):
                pts[r * cols + c] = (c * s, r * s, 0.0)
        return pts


@dataclass
class CalibrationReport:
    """Recovered camera (extrinsic identity) plus per-view diagnostics."""

    camera: CameraModel
    board_poses: list[RigidTransform]
    mean_error_px: float
    per_view_error_px: list[float]
    iterations: int


def _homography_lstsq(obj_xy: np.ndarray, img: np.ndarray) -> np.ndarray:
    """Least-squares DLT homography with Hartley normalization."""

    def norm_transform(pts):
        mean = pts.mean(axis=0)
        scale = math.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
        return np.array([
            [scale, 0.0, -scale * mean[0]],
            [0.0, scale, -scale * mean[1]],
            [0.0, 0.0, 1.0],
        ])

    Ts = norm_transform(obj_xy)
    Td = norm_transform(img)
    s = (np.column_stack([obj_xy, np.ones(len(obj_xy))]) @ Ts.T)[:, :2]
    d = (np.column_stack([img, np.ones(len(img))]) @ Td.T)[:, :2]
    n = len(obj_xy)
    A = np.zeros((2 * n, 9))
    A[0::2, 0] = -s[:, 0]
    A[0::2, 1] = -s[:, 1]
    A[0::2, 2] = -1.0
    A[0::2, 6] = d[:, 0] * s[:, 0]
    A[0::2, 7] = d[:, 0] * s[:, 1]
    A[0::2, 8] = d[:, 0]
    A[1::2, 3] = -s[:, 0]
    A[1::2, 4] = -s[:, 1]
    A[1::2, 5] = -1.0
    A[1::2, 6] = d[:, 1] * s[:, 0]
    A[1::2, 7] = d[:, 1] * s[:, 1]
    A[1::2, 8] = d[:, 1]
    _, _, vt = np.linalg.svd(A)
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ H @ Ts
    return H / H[2, 2]


def _conic_row(H: np.ndarray, i: int, j: int) -> np.ndarray:
    """Constraint row h_i^T B h_j on b = (B11, B22, B13, B23, B33), B12 = 0."""
    hi, hj = H[:, i], H[:, j]
    return np.array([
        hi[0] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ])


def _closed_form_intrinsics(homographies: Sequence[np.ndarray]) -> tuple[float, float, float, float]:
    rows = []
    for H in homographies:
        rows.append(_conic_row(H, 0, 1))
        rows.append(_conic_row(H, 0, 0) - _conic_row(H, 1, 1))
    A = np.array(rows)
    _, svals, vt = np.linalg.svd(A)
    b = vt[-1]
    if b[0] < 0:
        b = -b
    b11, b22, b13, b23, b33 = b
    if b11 <= 0 or b22 <= 0:
        raise DegenerateViews("absolute-conic solution is not positive definite")
    cy = -b23 / b22
    cx = -b13 / b11
    lam = b33 - (b13 ** 2 / b11 + cy * (-b23))
    if lam <= 0:
        raise DegenerateViews("absolute-conic scale is non-positive")
    fx = math.sqrt(lam / b11)
    fy = math.sqrt(lam / b22)
    return fx, fy, cx, cy


def _pose_from_board_homography(H: np.ndarray, fx: float, fy: float,
                                cx: float, cy: float) -> RigidTransform:
    Kinv = np.array([
        [1.0 / fx, 0.0, -cx / fx],
        [0.0, 1.0 / fy, -cy / fy],
        [0.0, 0.0, 1.0],
    ])
    M = Kinv @ H
    h1, h2, h3 = M[:, 0], M[:, 1], M[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1, r2, t = lam * h1, lam * h2, lam * h3
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    r3 = np.cross(r1, r2)
    U, _, Vt = np.linalg.svd(np.stack([r1, r2, r3], axis=1))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return RigidTransform(Rotation.from_matrix(R), t)


def _check_normal_span(poses: Sequence[RigidTransform]) -> None:
    normals = [p.rotation.apply(np.array([0.0, 0.0, 1.0])) for p in poses]
    max_angle = 0.0
    for i in range(len(normals)):
        for j in range(i + 1, len(normals)):
            c = np.clip(abs(float(normals[i] @ normals[j])), -1.0, 1.0)
            max_angle = max(max_angle, math.degrees(math.acos(c)))
    if max_angle < NORMAL_SPAN_MIN_DEG:
        raise DegenerateViews(
            f"board normals span only {max_angle:.2f} deg "
            f"(need >= {NORMAL_SPAN_MIN_DEG})")


def _view_residual(theta: np.ndarray, pose: RigidTransform,
                   obj: np.ndarray, img: np.ndarray) -> np.ndarray:
    fx, fy, cx, cy = theta[:4]
    dist = theta[4:]
    pts = pose.apply_many(obj)
    px = project_points(pts, fx, fy, cx, cy, dist)
    return (px - img).ravel()


def _view_residual_jacobian(theta: np.ndarray, pose: RigidTransform,
                            obj: np.ndarray, img: np.ndarray):
    fx, fy, cx, cy = theta[:4]
    dist = theta[4:]
    pts = pose.apply_many(obj)
    px, d_pcam, d_intr = project_points_jacobian(pts, fx, fy, cx, cy, dist)
    r = (px - img).ravel()
    n = len(obj)
    J_pose = np.zeros((2 * n, 6))
    rotated = pts - pose.translation
    for i in range(n):
        J_pose[2 * i:2 * i + 2, :3] = d_pcam[i] @ (-skew(rotated[i]))
        J_pose[2 * i:2 * i + 2, 3:] = d_pcam[i]
    J_theta = d_intr.reshape(2 * n, 9)
    return r, J_theta, J_pose


def _total_cost(theta: np.ndarray, poses: list[RigidTransform],
                objs: list[np.ndarray], imgs: list[np.ndarray]) -> float:
    return sum(float(r @ r) for r in
               (_view_residual(theta, p, o, im)
                for p, o, im in zip(poses, objs, imgs)))


def _refine(theta: np.ndarray, poses: list[RigidTransform],
            objs: list[np.ndarray], imgs: list[np.ndarray]):
    """Joint LM over intrinsics + all view poses, Schur-eliminating poses."""
    n_views = len(poses)
    cost = _total_cost(theta, poses, objs, imgs)
    lam = DAMPING_INIT
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        A = np.zeros((9, 9))
        g_t = np.zeros(9)
        Bs, Ds, gs = [], [], []
        for p, o, im in zip(poses, objs, imgs):
            r, Jt, Jp = _view_residual_jacobian(theta, p, o, im)
            A += Jt.T @ Jt
            g_t += Jt.T @ r
            Bs.append(Jt.T @ Jp)
            Ds.append(Jp.T @ Jp)
            gs.append(Jp.T @ r)

        improved = False
        for _ in range(30):
            S = A + lam * np.eye(9)
            rhs = -g_t.copy()
            Dinvs = []
            try:
                for B, D, g in zip(Bs, Ds, gs):
                    Dinv = np.linalg.inv(D + lam * np.eye(6))
                    Dinvs.append(Dinv)
                    S -= B @ Dinv @ B.T
                    rhs += B @ (Dinv @ g)
                d_theta = np.linalg.solve(S, rhs)
            except np.linalg.LinAlgError:
                lam *= DAMPING_UP
                continue
            new_theta = theta + d_theta
            new_poses = []
            for B, Dinv, g, p in zip(Bs, Dinvs, gs, poses):
                d_pose = -Dinv @ (g + B.T @ d_theta)
                rot = Rotation.from_rotvec(d_pose[:3]).compose(p.rotation)
                new_poses.append(RigidTransform(rot, p.translation + d_pose[3:]))
            if new_theta[0] <= 0 or new_theta[1] <= 0:
                lam *= DAMPING_UP
                continue
            new_cost = _total_cost(new_theta, new_poses, objs, imgs)
            if math.isfinite(new_cost) and new_cost <= cost:
                improved = True
                break
            lam *= DAMPING_UP
        if not improved:
            break
        rel_change = (cost - new_cost) / max(cost, 1e-300)
        theta, poses, cost = new_theta, new_poses, new_cost
        lam = max(lam * DAMPING_DOWN, 1e-13)
        if rel_change < REL_TOL:
            break
    if not math.isfinite(cost):
        raise DivergedRefinement("refinement cost is non-finite")
    return theta, poses, cost, iterations


def calibrate(observations: Sequence[CheckerboardObservation],
              image_size: tuple[int, int],
              camera_id: str = "cam0") -> CalibrationReport:
    """Recover intrinsics + distortion from checkerboard views.

    Args:
        observations: at least MIN_VIEWS views with non-degenerate board
            orientations (normal span >= 5 degrees).
        image_size: (width, height) in pixels.

    Returns:
        CalibrationReport with the recovered CameraModel (extrinsic left
        at identity), per-view board poses, and reprojection errors (mean
        Euclidean pixel distance per corner).

    Raises:
        TooFewViews, DegenerateViews, DivergedRefinement.
    """
    if len(observations) < MIN_VIEWS:
        raise TooFewViews(f"need >= {MIN_VIEWS} views, got {len(observations)}")
    objs = [obs.board_points() for obs in observations]
    imgs = [obs.corners for obs in observations]

    homographies = [_homography_lstsq(o[:, :2], im) for o, im in zip(objs, imgs)]
    fx, fy, cx, cy = _closed_form_intrinsics(homographies)
    poses = [_pose_from_board_homography(H, fx, fy, cx, cy) for H in homographies]
    _check_normal_span(poses)

    theta0 = np.array([fx, fy, cx, cy, 0.0, 0.0, 0.0, 0.0, 0.0])
    theta, poses, _, iterations = _refine(theta0, poses, objs, imgs)

    width, height = image_size
    camera = CameraModel(
        fx=float(theta[0]), fy=float(theta[1]),
        cx=float(theta[2]), cy=float(theta[3]),
        distortion=theta[4:].copy(),
        image_width=int(width), image_height=int(height),
        extrinsic=RigidTransform.identity(),
        camera_id=camera_id,
    )
    per_view = reprojection_report(camera, observations, poses)
    counts = [obs.rows * obs.cols for obs in observations]
    mean_error = float(np.average(per_view, weights=counts))
    return CalibrationReport(
        camera=camera,
        board_poses=poses,
        mean_error_px=mean_error,
        per_view_error_px=per_view,
        iterations=iterations,
    )


def reprojection_report(cam: CameraModel,
                        observations: Sequence[CheckerboardObservation],
                        board_poses: Sequence[RigidTransform]) -> list[float]:
    """Per-view mean Euclidean pixel error of the given board poses."""
    if len(observations) != len(board_poses):
        raise ValueError("poses must correspond one-to-one with observations")
    errors = []
    for obs, pose in zip(observations, board_poses):
        pts = pose.apply_many(obs.board_points())
        px = project_points(pts, cam.fx, cam.fy, cam.cx, cam.cy, cam.distortion)
        errors.append(float(np.mean(np.linalg.norm(px - obs.corners, axis=1))))
    return errors


# --- observation records ----------------------------------------------------
#
# One JSON object per line: type ("board_view"), view_id, rows, cols,
# square_size_mm, corners (rows*cols x [u, v] pixels, row-major).


def observation_to_record(obs: CheckerboardObservation) -> dict:
    return {
        "type": "board_view",
        "view_id": obs.view_id,
        "rows": obs.rows,
        "cols": obs.cols,
        "square_size_mm": obs.square_size,
        "corners": [[float(u), float(v)] for u, v in obs.corners],
    }


def observation_from_record(rec: dict) -> CheckerboardObservation:
    if rec.get("type") != "board_view":
        raise ValueError(f"not a board_view record: {rec.get('type')!r}")
    return CheckerboardObservation(
        view_id=str(rec["view_id"]),
        rows=int(rec["rows"]),
        cols=int(rec["cols"]),
        square_size=float(rec["square_size_mm"]),
        corners=np.array(rec["corners"], dtype=np.float64),
    )


def write_observations(observations: Sequence[CheckerboardObservation],
                       fh: IO[str]) -> None:
    for obs in observations:
        fh.write(json.dumps(observation_to_record(obs)) + "\n")


def read_observations(fh: IO[str]) -> list[CheckerboardObservation]:
    return [observation_from_record(json.loads(line))
            for line in fh if line.strip()]


def report_to_dict(report: CalibrationReport) -> dict:
    cam = report.camera
    return {
        "camera": {
            "camera_id": cam.camera_id,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "distortion": [float(v) for v in cam.distortion],
            "image_width": cam.image_width,
            "image_height": cam.image_height,
        },
        "mean_error_px": report.mean_error_px,
        "per_view_error_px": report.per_view_error_px,
        "board_poses": [{"q": [float(v) for v in p.rotation.q],
                         "t": [float(v) for v in p.translation]}
                        for p in report.board_poses],
        "iterations": report.iterations,
    }


def save_report(report: CalibrationReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")


def load_camera(path: str | Path) -> CameraModel:
    """Load the CameraModel from a saved calibration report."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    c = data["camera"]
    return CameraModel(
        fx=float(c["fx"]), fy=float(c["fy"]),
        cx=float(c["cx"]), cy=float(c["cy"]),
        distortion=np.array(c["distortion"], dtype=np.float64),
        image_width=int(c["image_width"]),
        image_height=int(c["image_height"]),
        camera_id=str(c.get("camera_id", "cam0")),
    )
