"""Synthetic-scene oracle: ground-truth poses and noisy tag detections.

Generates the 3-camera, 5-tag scene (head sway, coil tremor, occlusion
schedules) plus the Monte-Carlo re-solve oracle used to validate the pose
solver's error statistics. Identical seed and config produce bitwise
identical streams; per-camera noise comes from independently spawned
generators so parallel projection cannot reorder draws.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np

from .errors import TagNeverVisible
from .frames import SceneLayout, SphereHead
from .geometry import (
    CameraModel,
    RigidTransform,
    Rotation,
    look_at,
    project_points,
)
from .pose import TagDetection, TagSpec

# Camera constants forced by the published hardware: 1920 x 1280 sensor,
# 65 degree horizontal field of view -> fx = (1920/2) / tan(32.5 deg).
IMAGE_WIDTH = 1920
IMAGE_HEIGHT = 1280
HFOV_DEG = 65.0
DEFAULT_FOCAL_PX = IMAGE_WIDTH / 2.0 / math.tan(math.radians(HFOV_DEG / 2.0))
TAG_SIDE_MM = 24.0

# Simulator noise level at which the pipeline's mean reprojection error
# lands mid-way through the published 0.06-0.07 px operating band (mean
# e_proj is 0.627 * sigma_px for a 4-corner solve; tuned empirically).
TUNED_SIGMA_PX = 0.104


def _surface_tag_transform(model: SphereHead, azimuth_deg: float,
                           elevation_deg: float) -> RigidTransform:
    """Tag->head transform for a tag stuck on the sphere, +z outward."""
    pos = model.surface_point(azimuth_deg, elevation_deg)
    z = model.surface_normal(pos)
    ref = np.array([0.0, 1.0, 0.0])
    if abs(float(z @ ref)) > 0.95:
        ref = np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(Rotation.from_matrix(np.stack([x, y, z], axis=1)), pos)


def standoff_coil_pose(layout: SceneLayout, target: np.ndarray,
                       standoff_mm: float = 35.0) -> RigidTransform:
    """Coil->head pose hovering over a scalp target, -z aimed at it."""
    normal = layout.head_model.surface_normal(target)
    pos = target + standoff_mm * normal
    z = normal  # coil +z points away from the head
    ref = np.array([0.0, 1.0, 0.0])
    if abs(float(z @ ref)) > 0.95:
        ref = np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(Rotation.from_matrix(np.stack([x, y, z], axis=1)), pos)


def default_target_grid(model: SphereHead) -> dict[str, np.ndarray]:
    """The 15-point stimulation grid: A1-A9, B1-B3, C1-C3 on the scalp."""
    targets: dict[str, np.ndarray] = {}
    elevations = (20.0, 40.0, 60.0)
    n = 0
    for el in elevations:
        for az in (-30.0, 0.0, 30.0):
            n += 1
            targets[f"A{n}"] = model.surface_point(az, el)
    for i, el in enumerate(elevations, start=1):
        targets[f"B{i}"] = model.surface_point(-60.0, el)
    for i, el in enumerate(elevations, start=1):
        targets[f"C{i}"] = model.surface_point(60.0, el)
    return targets


def default_scene_layout(camera_distance_mm: float = 700.0,
                         head_radius_mm: float = 85.0) -> SceneLayout:
    """The operating scene: one frontal and two lateral cameras at +/-60
    degrees azimuth, four head tags (two cheekbones, forehead, back of
    head) and one coil tag, a spherical scalp, and the 15-target grid.
    """
    model = SphereHead(radius=head_radius_mm)
    cameras = {}
    for i, az in enumerate((0.0, 60.0, -60.0)):
        a = math.radians(az)
        pos = camera_distance_mm * np.array([math.sin(a), 0.0, math.cos(a)])
        cameras[f"cam{i}"] = CameraModel(
            fx=DEFAULT_FOCAL_PX, fy=DEFAULT_FOCAL_PX,
            cx=IMAGE_WIDTH / 2.0, cy=IMAGE_HEIGHT / 2.0,
            image_width=IMAGE_WIDTH, image_height=IMAGE_HEIGHT,
            extrinsic=look_at(pos, np.zeros(3)),
            camera_id=f"cam{i}",
        )
    head_tags = {
        1: _surface_tag_transform(model, -40.0, -10.0),  # right cheekbone
        2: _surface_tag_transform(model, 40.0, -10.0),   # left cheekbone
        3: _surface_tag_transform(model, 0.0, 35.0),     # forehead
        4: _surface_tag_transform(model, 180.0, 10.0),   # back of head
    }
    coil_tag_id = 5
    tag_specs = {tid: TagSpec(tag_id=tid, side_length=TAG_SIDE_MM)
                 for tid in (1, 2, 3, 4, 5)}
    return SceneLayout(
        cameras=cameras,
        head_tags=head_tags,
        coil_tag_id=coil_tag_id,
        coil_tag_transform=RigidTransform.identity(),
        head_model=model,
        planned_targets=default_target_grid(model),
        tag_specs=tag_specs,
    )


@dataclass(frozen=True)
class MotionParams:
    """Head sway (slow sinusoid) and coil tremor (low-passed noise)."""

    sway_amp_mm: float = 5.0
    sway_amp_deg: float = 2.0
    sway_period_s: float = 10.0
    tremor_amp_mm: float = 1.0
    tremor_amp_deg: float = 0.5
    tremor_cutoff_hz: float = 2.0


@dataclass(frozen=True)
class Occlusion:
    """Suppress a tag (or a whole camera when tag_id is None) over
    [frame_start, frame_end)."""

    camera_id: str
    tag_id: int | None
    frame_start: int
    frame_end: int

    def blocks(self, camera_id: str, tag_id: int, frame_id: int) -> bool:
        return (camera_id == self.camera_id
                and (self.tag_id is None or tag_id == self.tag_id)
                and self.frame_start <= frame_id < self.frame_end)


@dataclass
class SimConfig:
    layout: SceneLayout
    sigma_px: float = 0.0
    n_frames: int = 100
    frame_rate_hz: float = 30.0
    seed: int = 0
    motion: MotionParams | None = None
    occlusions: list[Occlusion] = field(default_factory=list)
    head_base: RigidTransform = field(default_factory=RigidTransform.identity)
    coil_base: RigidTransform | None = None
    target_name: str | None = None

    def __post_init__(self):
        if self.sigma_px < 0:
            raise ValueError("sigma_px must be non-negative")
        if self.n_frames < 0 or self.frame_rate_hz <= 0:
            # n_frames = 0 means "unbounded" for live sources
            raise ValueError("n_frames must be >= 0 and frame rate positive")

    def resolved_target(self) -> str:
        if self.target_name is not None:
            return self.target_name
        return next(iter(self.layout.planned_targets))

    def resolved_coil_base(self) -> RigidTransform:
        """Coil->head base pose; defaults to hovering over the target."""
        if self.coil_base is not None:
            return self.coil_base
        target = self.layout.planned_targets[self.resolved_target()]
        return standoff_coil_pose(self.layout, target)


@dataclass(frozen=True)
class GroundTruthFrame:
    frame_id: int
    timestamp_ms: float
    head_pose: RigidTransform
    coil_pose: RigidTransform
    target_point: np.ndarray
    true_corners: dict[tuple[str, int], np.ndarray]


class _Tremor:
    """First-order low-passed Gaussian noise on six pose channels."""

    def __init__(self, params: MotionParams, frame_rate_hz: float,
                 rng: np.random.Generator):
        self.rng = rng
        a = math.exp(-2.0 * math.pi * params.tremor_cutoff_hz / frame_rate_hz)
        self.a = a
        # scale driving noise so the stationary std equals the amplitude
        self.gain = math.sqrt((1.0 + a) / (1.0 - a)) if a < 1.0 else 0.0
        self.amp = np.array([params.tremor_amp_mm] * 3
                            + [math.radians(params.tremor_amp_deg)] * 3)
        self.state = np.zeros(6)

    def step(self) -> RigidTransform:
        w = self.rng.normal(0.0, 1.0, size=6) * self.gain * self.amp
        self.state = self.a * self.state + (1.0 - self.a) * w
        return RigidTransform(Rotation.from_rotvec(self.state[3:]),
                              self.state[:3].copy())


_SWAY_T_DIR = np.array([1.0, 0.3, 0.2]) / np.linalg.norm([1.0, 0.3, 0.2])
_SWAY_R_AXIS = np.array([0.2, 1.0, 0.3]) / np.linalg.norm([0.2, 1.0, 0.3])


def _sway(params: MotionParams, t_s: float) -> RigidTransform:
    phase = 2.0 * math.pi * t_s / params.sway_period_s
    dt = params.sway_amp_mm * math.sin(phase) * _SWAY_T_DIR
    ang = math.radians(params.sway_amp_deg) * math.sin(phase + 0.7)
    return RigidTransform(Rotation.from_axis_angle(_SWAY_R_AXIS, ang), dt)


def _tag_world_poses(layout: SceneLayout, head: RigidTransform,
                     coil: RigidTransform) -> dict[int, RigidTransform]:
    poses = {}
    for tag_id, tag_to_head in layout.head_tags.items():
        poses[tag_id] = head.compose(tag_to_head)
    poses[layout.coil_tag_id] = coil.compose(layout.coil_tag_transform)
    return poses


def _visible(cam: CameraModel, tag_to_cam: RigidTransform,
             corners_cam: np.ndarray, corners_px: np.ndarray) -> bool:
    if np.any(corners_cam[:, 2] <= 0):
        return False
    # front-facing: the printed face's +z normal points back at the camera
    normal = tag_to_cam.rotation.apply(np.array([0.0, 0.0, 1.0]))
    center = tag_to_cam.translation
    if float(normal @ center) >= 0:
        return False
    pts = np.vstack([corners_px,
                     project_points(center[None, :], cam.fx, cam.fy,
                                    cam.cx, cam.cy, cam.distortion)])
    return bool(np.all((pts[:, 0] >= 0) & (pts[:, 0] < cam.image_width)
                       & (pts[:, 1] >= 0) & (pts[:, 1] < cam.image_height)))


def true_target_point(layout: SceneLayout, head: RigidTransform,
                      coil: RigidTransform) -> np.ndarray | None:
    """Ground-truth stimulation point in the head frame, or None if the
    coil axis misses the head model."""
    coil_in_head = head.inverse().compose(coil)
    direction = coil_in_head.rotation.apply(np.array([0.0, 0.0, -1.0]))
    origin = coil_in_head.translation
    t_hit = layout.head_model.intersect_ray(origin, direction)
    if t_hit is None:
        return None
    return origin + t_hit * direction


def project_frame(layout: SceneLayout, head: RigidTransform,
                  coil: RigidTransform, frame_id: int, timestamp_ms: float,
                  sigma_px: float, cam_rngs: dict[str, np.random.Generator],
                  occlusions: list[Occlusion]) -> tuple[
                      list[TagDetection], dict[tuple[str, int], np.ndarray]]:
    """Project all visible tags for one frame and add pixel noise.

    Returns the detections plus the pre-noise corner pixels keyed by
    (camera_id, tag_id).
    """
    tag_world = _tag_world_poses(layout, head, coil)
    all_tags = sorted(list(layout.head_tags) + [layout.coil_tag_id])
    detections: list[TagDetection] = []
    true_corners: dict[tuple[str, int], np.ndarray] = {}
    for cid in sorted(layout.cameras):
        cam = layout.cameras[cid]
        world_to_cam = cam.world_to_camera()
        rng = cam_rngs[cid]
        for tag_id in all_tags:
            if any(o.blocks(cid, tag_id, frame_id) for o in occlusions):
                continue
            tag_to_cam = world_to_cam.compose(tag_world[tag_id])
            corners_cam = tag_to_cam.apply_many(layout.tag_specs[tag_id].corners())
            if np.any(corners_cam[:, 2] <= 0):
                continue
            corners_px = project_points(corners_cam, cam.fx, cam.fy,
                                        cam.cx, cam.cy, cam.distortion)
            if not _visible(cam, tag_to_cam, corners_cam, corners_px):
                continue
            true_corners[(cid, tag_id)] = corners_px
            noisy = corners_px
            if sigma_px > 0:
                noisy = corners_px + rng.normal(0.0, sigma_px, size=(4, 2))
            detections.append(TagDetection(
                camera_id=cid, frame_id=frame_id, timestamp_ms=timestamp_ms,
                tag_id=tag_id, corners=noisy, confidence=1.0))
    return detections, true_corners


def simulate(config: SimConfig) -> tuple[list[TagDetection], list[GroundTruthFrame]]:
    """Generate detection and ground-truth streams for a configured run.

    For each frame the motion models advance, every registered tag is
    projected through every camera, visibility is gated (in-frustum,
    front-facing, not occluded), i.i.d. Gaussian pixel noise is added, and
    TagDetection records plus a GroundTruthFrame are emitted.

    Warns:
        TagNeverVisible: a tag produced no detection over the whole run.
    """
    layout = config.layout
    cam_ids = sorted(layout.cameras)
    seeds = np.random.SeedSequence(config.seed).spawn(len(cam_ids) + 1)
    tremor_rng = np.random.default_rng(seeds[0])
    cam_rngs = {cid: np.random.default_rng(s)
                for cid, s in zip(cam_ids, seeds[1:])}

    head_base = config.head_base
    coil_base_head = config.resolved_coil_base()  # coil -> head
    motion = config.motion
    tremor = _Tremor(motion, config.frame_rate_hz, tremor_rng) if motion else None

    detections: list[TagDetection] = []
    truths: list[GroundTruthFrame] = []
    seen_tags: set[int] = set()
    all_tags = sorted(list(layout.head_tags) + [layout.coil_tag_id])
    dt_ms = 1000.0 / config.frame_rate_hz

    for frame_id in range(config.n_frames):
        t_s = frame_id / config.frame_rate_hz
        if motion is not None:
            head = head_base.compose(_sway(motion, t_s))
            coil = head.compose(coil_base_head.compose(tremor.step()))
        else:
            head = head_base
            coil = head.compose(coil_base_head)
        timestamp = frame_id * dt_ms
        frame_dets, true_corners = project_frame(
            layout, head, coil, frame_id, timestamp, config.sigma_px,
            cam_rngs, config.occlusions)
        detections.extend(frame_dets)
        seen_tags.update(d.tag_id for d in frame_dets)

        target = true_target_point(layout, head, coil)
        truths.append(GroundTruthFrame(
            frame_id=frame_id,
            timestamp_ms=timestamp,
            head_pose=head,
            coil_pose=coil,
            target_point=target if target is not None else np.full(3, np.nan),
            true_corners=true_corners,
        ))

    for tag_id in all_tags:
        if tag_id not in seen_tags:
            warnings.warn(f"tag {tag_id} was never visible during the run",
                          TagNeverVisible)
    return detections, truths


# --- Monte-Carlo pose oracle ----------------------------------------------


@dataclass(frozen=True)
class OracleSamples:
    """Per-trial solver errors from independent noisy re-solves."""

    translation_err: np.ndarray   # (trials, 3) mm, camera frame
    rotation_err_rad: np.ndarray  # (trials,)
    distance_err: np.ndarray      # (trials,) mm


def _gauss_newton_resolve(cam: CameraModel, obj: np.ndarray,
                          observed: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Plain Gauss-Newton on a global (rotvec, t) parameterization with
    central-difference Jacobians; deliberately independent of the
    production solver's incremental-LM path."""

    def residual(x):
        pose = RigidTransform(Rotation.from_rotvec(x[:3]), x[3:])
        pts = pose.apply_many(obj)
        px = project_points(pts, cam.fx, cam.fy, cam.cx, cam.cy, cam.distortion)
        return (px - observed).ravel()

    x = x0.copy()
    step = 1e-6
    for _ in range(25):
        r = residual(x)
        J = np.empty((r.size, 6))
        for j in range(6):
            xp = x.copy()
            xm = x.copy()
            xp[j] += step
            xm[j] -= step
            J[:, j] = (residual(xp) - residual(xm)) / (2.0 * step)
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        x = x + delta
        if np.linalg.norm(delta) < 1e-10:
            break
    return x


def monte_carlo_pose_oracle(cam: CameraModel, spec: TagSpec,
                            true_pose: RigidTransform, sigma_px: float,
                            trials: int = 1000, seed: int = 0) -> OracleSamples:
    """Brute-force resampling oracle for the pose solver's error statistics.

    Projects the tag's true corners, perturbs them with fresh Gaussian
    noise per trial, and re-solves each trial with an independent
    Gauss-Newton minimizer started at the true pose. The resulting error
    samples describe the distribution any correct solver of the same cost
    must reproduce.
    """
    if trials < 100:
        raise ValueError("oracle needs at least 100 trials")
    rng = np.random.default_rng(seed)
    obj = spec.corners()
    base = project_points(true_pose.apply_many(obj), cam.fx, cam.fy,
                          cam.cx, cam.cy, cam.distortion)
    x_true = np.concatenate([true_pose.rotation.as_rotvec(),
                             true_pose.translation])
    d_true = float(np.linalg.norm(true_pose.translation))

    t_err = np.zeros((trials, 3))
    r_err = np.zeros(trials)
    d_err = np.zeros(trials)
    for i in range(trials):
        observed = base
        if sigma_px > 0:
            observed = base + rng.normal(0.0, sigma_px, size=base.shape)
        x = _gauss_newton_resolve(cam, obj, observed, x_true)
        rot = Rotation.from_rotvec(x[:3])
        t_err[i] = x[3:] - true_pose.translation
        r_err[i] = true_pose.rotation.angle_to(rot)
        d_err[i] = float(np.linalg.norm(x[3:])) - d_true
    return OracleSamples(t_err, r_err, d_err)


# --- ground-truth records ---------------------------------------------------
#
# Same newline-delimited JSON style as the detection stream. Fields: type
# ("truth"), frame_id, timestamp_ms, head_pose / coil_pose as
# {"q": [w,x,y,z], "t": [x,y,z] mm}, target ([x,y,z] mm in the head frame,
# null when the coil axis misses the head).


def truth_to_record(frame: GroundTruthFrame) -> dict:
    def enc(p: RigidTransform) -> dict:
        return {"q": [float(v) for v in p.rotation.q],
                "t": [float(v) for v in p.translation]}

    target = None
    if np.all(np.isfinite(frame.target_point)):
        target = [float(v) for v in frame.target_point]
    return {
        "type": "truth",
        "frame_id": frame.frame_id,
        "timestamp_ms": frame.timestamp_ms,
        "head_pose": enc(frame.head_pose),
        "coil_pose": enc(frame.coil_pose),
        "target": target,
    }


def truth_from_record(rec: dict) -> GroundTruthFrame:
    if rec.get("type") != "truth":
        raise ValueError(f"not a truth record: {rec.get('type')!r}")

    def dec(d: dict) -> RigidTransform:
        return RigidTransform(Rotation(np.array(d["q"], dtype=np.float64)),
                              np.array(d["t"], dtype=np.float64))

    target = rec.get("target")
    return GroundTruthFrame(
        frame_id=int(rec["frame_id"]),
        timestamp_ms=float(rec["timestamp_ms"]),
        head_pose=dec(rec["head_pose"]),
        coil_pose=dec(rec["coil_pose"]),
        target_point=(np.array(target, dtype=np.float64) if target is not None
                      else np.full(3, np.nan)),
        true_corners={},
    )


def write_truths(truths: Iterable[GroundTruthFrame], fh: IO[str]) -> None:
    for frame in truths:
        fh.write(json.dumps(truth_to_record(frame)) + "\n")


def read_truths(fh: IO[str]) -> Iterator[GroundTruthFrame]:
    for line in fh:
        line = line.strip()
        if line:
            yield truth_from_record(json.loads(line))
