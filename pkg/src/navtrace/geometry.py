"""Rigid-body transforms, pinhole projection, and lens distortion.

Conventions used throughout the engine:

- positions and translations are in millimeters, angles in radians
  internally (degrees only in reports and wire messages);
- a ``RigidTransform`` maps child-frame coordinates into parent-frame
  coordinates: ``p_parent = R @ p_child + t``;
- camera frames are right-handed with +z along the optical axis and +y
  pointing down the image, so pixel v grows with camera y;
- distortion is the 5-coefficient Brown-Conrady model ``(k1, k2, p1, p2, k3)``
  applied to normalized coordinates before the focal/principal-point map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NoConvergence

Vec3 = np.ndarray
Pixel = np.ndarray


def vec3(x: float, y: float, z: float) -> Vec3:
    """Build a float64 3-vector, validating finiteness."""
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector components: {v}")
    return v


def pixel(u: float, v: float) -> Pixel:
    """Build a float64 pixel coordinate (u, v)."""
    p = np.array([u, v], dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite pixel components: {p}")
    return p


def _as_vec3(p) -> Vec3:
    v = np.asarray(p, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected shape (3,), got {v.shape}")
    return v


@dataclass(frozen=True)
class Rotation:
    """A 3D rotation stored as a unit quaternion (w, x, y, z).

    The quaternion is renormalized on construction, so compositions stay
    on the unit sphere over arbitrarily long sessions. The matrix form is
    generated on demand.
    """

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
        n = float(np.linalg.norm(q))
        if not math.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm too small or non-finite")
        q = q / n
        if q[0] < 0.0:  # canonical hemisphere; double cover
            q = -q
        object.__setattr__(self, "q", q)
        self.q.setflags(write=False)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Rotation":
        """Rotation of ``angle_rad`` about ``axis`` (need not be unit)."""
        a = _as_vec3(axis)
        n = float(np.linalg.norm(a))
        if n < 1e-15:
            if abs(angle_rad) > 1e-12:
                raise ValueError("zero axis with nonzero angle")
            return cls.identity()
        half = 0.5 * angle_rad
        return cls(np.concatenate([[math.cos(half)], math.sin(half) * a / n]))

    @classmethod
    def from_rotvec(cls, rv) -> "Rotation":
        """Rotation from an axis-angle vector (axis * angle, radians)."""
        r = _as_vec3(rv)
        angle = float(np.linalg.norm(r))
        if angle < 1e-15:
            return cls.identity()
        return cls.from_axis_angle(r / angle, angle)

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        """Quaternion from a 3x3 rotation matrix (Shepperd's method)."""
        M = np.asarray(m, dtype=np.float64)
        if M.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        t = np.trace(M)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            q = np.array([
                0.25 * s,
                (M[2, 1] - M[1, 2]) / s,
                (M[0, 2] - M[2, 0]) / s,
                (M[1, 0] - M[0, 1]) / s,
            ])
        elif M[0, 0] >= M[1, 1] and M[0, 0] >= M[2, 2]:
            s = math.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2]) * 2.0
            q = np.array([
                (M[2, 1] - M[1, 2]) / s,
                0.25 * s,
                (M[0, 1] + M[1, 0]) / s,
                (M[0, 2] + M[2, 0]) / s,
            ])
        elif M[1, 1] >= M[2, 2]:
            s = math.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2]) * 2.0
            q = np.array([
                (M[0, 2] - M[2, 0]) / s,
                (M[0, 1] + M[1, 0]) / s,
                0.25 * s,
                (M[1, 2] + M[2, 1]) / s,
            ])
        else:
            s = math.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1]) * 2.0
            q = np.array([
                (M[1, 0] - M[0, 1]) / s,
                (M[0, 2] + M[2, 0]) / s,
                (M[1, 2] + M[2, 1]) / s,
                0.25 * s,
            ])
        return cls(q)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def apply(self, p) -> Vec3:
        """Rotate a 3-vector."""
        return self.as_matrix() @ _as_vec3(p)

    def compose(self, other: "Rotation") -> "Rotation":
        """Return self ∘ other (other applied first), renormalized."""
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        s = float(np.linalg.norm(self.q[1:]))
        w = abs(float(self.q[0]))
        return 2.0 * math.atan2(s, w)

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic distance to another rotation, radians."""
        return self.inverse().compose(other).angle()

    def as_rotvec(self) -> Vec3:
        angle = self.angle()
        if angle < 1e-12:
            return np.zeros(3)
        axis = self.q[1:] / math.sin(0.5 * angle)
        return axis * angle


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation, mapping child coordinates to parent."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = _as_vec3(self.translation)
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        object.__setattr__(self, "translation", t)
        self.translation.setflags(write=False)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(Rotation.identity(), np.zeros(3))

    def apply(self, p) -> Vec3:
        return self.rotation.apply(p) + self.translation

    def apply_many(self, pts: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return pts @ self.rotation.as_matrix().T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other: ``(self ∘ other)(p) == self(other(p))``."""
        return RigidTransform(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.inverse()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m


def transform_point(transform: RigidTransform, p) -> Vec3:
    """Apply a rigid transform to a point: ``R @ p + t``."""
    return transform.apply(p)


_ZERO_DIST = np.zeros(5)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with Brown-Conrady distortion and a world pose.

    ``extrinsic`` maps camera-frame coordinates into the world frame.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    distortion: np.ndarray = field(default_factory=lambda: _ZERO_DIST.copy())
    image_width: int = 1920
    image_height: int = 1280
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)
    camera_id: str = "cam0"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.image_width and 0 < self.cy < self.image_height):
            raise ValueError("principal point must lie inside the image")
        d = np.asarray(self.distortion, dtype=np.float64)
        if d.shape != (5,):
            raise ValueError("distortion must be (k1, k2, p1, p2, k3)")
        object.__setattr__(self, "distortion", d)
        self.distortion.setflags(write=False)

    def world_to_camera(self) -> RigidTransform:
        return self.extrinsic.inverse()


def distort_normalized(xn: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Apply Brown-Conrady distortion to (N, 2) normalized coordinates."""
    k1, k2, p1, p2, k3 = dist
    x = xn[:, 0]
    y = xn[:, 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    out = np.empty_like(xn)
    out[:, 0] = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    out[:, 1] = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return out


def project_points(pts_cam: np.ndarray, fx: float, fy: float, cx: float,
                   cy: float, dist: np.ndarray) -> np.ndarray:
    """Project (N, 3) camera-frame points to (N, 2) pixels.

    The homogeneous scale of the projection is realized as the divide by
    depth here; callers must guarantee z > 0.
    """
    z = pts_cam[:, 2]
    xn = pts_cam[:, :2] / z[:, None]
    xd = distort_normalized(xn, dist)
    xd[:, 0] = fx * xd[:, 0] + cx
    xd[:, 1] = fy * xd[:, 1] + cy
    return xd


def project_points_pose_jacobian(pts_cam: np.ndarray, fx: float, fy: float,
                                 cx: float, cy: float, dist: np.ndarray):
    """Projection plus the (N, 2, 3) derivative w.r.t. the camera point.

    The pose solver's hot path: same math as project_points_jacobian but
    without the intrinsic derivatives, fully vectorized.
    """
    k1, k2, p1, p2, k3 = dist
    X, Y, Z = pts_cam[:, 0], pts_cam[:, 1], pts_cam[:, 2]
    x = X / Z
    y = Y / Z
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    drad = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)

    px = np.empty((pts_cam.shape[0], 2))
    px[:, 0] = fx * (x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)) + cx
    px[:, 1] = fy * (y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y) + cy

    dxd_dx = radial + 2.0 * x * x * drad + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = 2.0 * x * y * drad + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dy = radial + 2.0 * y * y * drad + 6.0 * p1 * y + 2.0 * p2 * x

    iz = 1.0 / Z
    d_pcam = np.empty((pts_cam.shape[0], 2, 3))
    d_pcam[:, 0, 0] = fx * dxd_dx * iz
    d_pcam[:, 0, 1] = fx * dxd_dy * iz
    d_pcam[:, 0, 2] = fx * (-dxd_dx * x - dxd_dy * y) * iz
    d_pcam[:, 1, 0] = fy * dxd_dy * iz
    d_pcam[:, 1, 1] = fy * dyd_dy * iz
    d_pcam[:, 1, 2] = fy * (-dxd_dy * x - dyd_dy * y) * iz
    return px, d_pcam


def project(cam: CameraModel, p_cam) -> Pixel:
    """Project one camera-frame point to pixel coordinates.

    Raises:
        BehindCamera: if the point's depth is not strictly positive.
    """
    p = _as_vec3(p_cam)
    if p[2] <= 0.0:
        raise BehindCamera(f"point depth {p[2]:.3f} mm is not in front of camera")
    return project_points(p[None, :], cam.fx, cam.fy, cam.cx, cam.cy,
                          cam.distortion)[0]


def pixel_in_frame(cam: CameraModel, px) -> bool:
    """Whether a pixel lies inside the image bounds (the out-of-frame flag)."""
    u, v = np.asarray(px, dtype=np.float64)
    return bool(0.0 <= u < cam.image_width and 0.0 <= v < cam.image_height)


def undistort(cam: CameraModel, px, max_iter: int = 50,
              tol: float = 1e-12) -> np.ndarray:
    """Invert the distortion map, returning normalized coordinates.

    Fixed-point iteration on the Brown-Conrady model; round-trips through
    ``project`` to better than 1e-6 px for sane coefficients.

    Raises:
        NoConvergence: if the iteration has not settled after ``max_iter``
            steps (pathological coefficients).
    """
    u, v = np.asarray(px, dtype=np.float64)
    xd = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy])
    if not np.any(cam.distortion):
        return xd
    k1, k2, p1, p2, k3 = cam.distortion
    x, y = xd
    for _ in range(max_iter):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x_new = (xd[0] - dx) / radial
        y_new = (xd[1] - dy) / radial
        step = max(abs(x_new - x), abs(y_new - y))
        x, y = x_new, y_new
        if step < tol:
            return np.array([x, y])
    raise NoConvergence(f"distortion inversion stalled at step {step:.3e}")


def project_points_jacobian(pts_cam: np.ndarray, fx: float, fy: float,
                            cx: float, cy: float, dist: np.ndarray):
    """Projection with analytic derivatives, for the least-squares solvers.

    Args:
        pts_cam: (N, 3) camera-frame points, all z > 0.

    Returns:
        (pixels, d_pcam, d_intr): pixels is (N, 2); d_pcam is (N, 2, 3),
        the derivative w.r.t. the camera-frame point; d_intr is (N, 2, 9),
        w.r.t. (fx, fy, cx, cy, k1, k2, p1, p2, k3).
    """
    k1, k2, p1, p2, k3 = dist
    n = pts_cam.shape[0]
    X, Y, Z = pts_cam[:, 0], pts_cam[:, 1], pts_cam[:, 2]
    x = X / Z
    y = Y / Z
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    # dradial/dr2, used by the chain rule below
    drad = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)

    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    px = np.stack([fx * xd + cx, fy * yd + cy], axis=1)

    # distorted-normalized wrt normalized
    dxd_dx = radial + 2.0 * x * x * drad + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = 2.0 * x * y * drad + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dx = 2.0 * x * y * drad + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dy = radial + 2.0 * y * y * drad + 6.0 * p1 * y + 2.0 * p2 * x

    # normalized wrt camera point
    iz = 1.0 / Z
    dx_dp = np.stack([iz, np.zeros(n), -x * iz], axis=1)
    dy_dp = np.stack([np.zeros(n), iz, -y * iz], axis=1)

    d_pcam = np.empty((n, 2, 3))
    d_pcam[:, 0, :] = fx * (dxd_dx[:, None] * dx_dp + dxd_dy[:, None] * dy_dp)
    d_pcam[:, 1, :] = fy * (dyd_dx[:, None] * dx_dp + dyd_dy[:, None] * dy_dp)

    d_intr = np.zeros((n, 2, 9))
    d_intr[:, 0, 0] = xd
    d_intr[:, 1, 1] = yd
    d_intr[:, 0, 2] = 1.0
    d_intr[:, 1, 3] = 1.0
    # distortion coefficients: (k1, k2, p1, p2, k3)
    d_intr[:, 0, 4] = fx * x * r2
    d_intr[:, 1, 4] = fy * y * r2
    d_intr[:, 0, 5] = fx * x * r2 * r2
    d_intr[:, 1, 5] = fy * y * r2 * r2
    d_intr[:, 0, 6] = fx * 2.0 * x * y
    d_intr[:, 1, 6] = fy * (r2 + 2.0 * y * y)
    d_intr[:, 0, 7] = fx * (r2 + 2.0 * x * x)
    d_intr[:, 1, 7] = fy * 2.0 * x * y
    d_intr[:, 0, 8] = fx * x * r2 ** 3
    d_intr[:, 1, 8] = fy * y * r2 ** 3
    return px, d_pcam, d_intr


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(a) @ b == cross(a, b)``."""
    x, y, z = _as_vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """Camera-to-world transform for a camera at ``position`` viewing ``target``.

    The optical axis (+z) points at the target; +y points down-image,
    chosen so the image x axis is horizontal w.r.t. ``up``.
    """
    pos = _as_vec3(position)
    z = _as_vec3(target) - pos
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("camera position coincides with target")
    z = z / nz
    x = np.cross(z, _as_vec3(up))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        # looking straight along up; pick any horizontal axis
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    m = np.stack([x, y, z], axis=1)
    return RigidTransform(Rotation.from_matrix(m), pos)
