"""Frame graph: camera-world-head-coil-target transform chain.

The scene layout registers where every tag sits on the head and coil and
where every camera sits in the world. Per-frame tag estimates are mapped
through those edges into head->world and coil->world hypotheses, fused,
and finally cast onto the head-model surface to locate the stimulation
point in the head frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MissingPose, NoCoilTag, NoHeadTags, NoIntersection
from .fusion import (
    WorldPoseHypothesis,
    fuse_world_hypotheses,
    rotate_sigma,
)
from .geometry import CameraModel, RigidTransform, Rotation
from .pose import PoseEstimate, TagSpec

# a lone hypothesis carries no cross-check; widen its sigma
SINGLE_TAG_SIGMA_INFLATION = 2.0
FULL_CONFIDENCE_TAG_COUNT = 3


@dataclass(frozen=True)
class SphereHead:
    """Spherical scalp model centered in the head frame."""

    radius: float = 85.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        c = np.asarray(self.center, dtype=np.float64)
        object.__setattr__(self, "center", c)
        self.center.setflags(write=False)

    def intersect_ray(self, origin: np.ndarray, direction: np.ndarray) -> float | None:
        """Smallest positive ray parameter hitting the sphere, or None."""
        o = origin - self.center
        d = direction / np.linalg.norm(direction)
        b = float(o @ d)
        c = float(o @ o) - self.radius ** 2
        disc = b * b - c
        if disc < 0:
            return None
        sq = math.sqrt(disc)
        for t in (-b - sq, -b + sq):
            if t > 1e-9:
                return float(t)
        return None

    def surface_normal(self, point: np.ndarray) -> np.ndarray:
        n = np.asarray(point, dtype=np.float64) - self.center
        return n / np.linalg.norm(n)

    def surface_point(self, azimuth_deg: float, elevation_deg: float) -> np.ndarray:
        """Point on the sphere; azimuth about +y from +z, elevation toward +y."""
        az = math.radians(azimuth_deg)
        el = math.radians(elevation_deg)
        d = np.array([
            math.cos(el) * math.sin(az),
            math.sin(el),
            math.cos(el) * math.cos(az),
        ])
        return self.center + self.radius * d


@dataclass(frozen=True)
class MeshHead:
    """Triangle-mesh scalp surface (vertices mm, triangle vertex indices)."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("mesh needs (V, 3) vertices and (T, 3) triangles")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def intersect_ray(self, origin: np.ndarray, direction: np.ndarray) -> float | None:
        """Moller-Trumbore over all triangles; smallest positive hit."""
        d = direction / np.linalg.norm(direction)
        v0 = self.vertices[self.triangles[:, 0]]
        e1 = self.vertices[self.triangles[:, 1]] - v0
        e2 = self.vertices[self.triangles[:, 2]] - v0
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        if not np.any(hit):
            return None
        return float(t[hit].min())

    def surface_normal(self, point: np.ndarray) -> np.ndarray:
        # nearest-triangle face normal
        p = np.asarray(point, dtype=np.float64)
        v0 = self.vertices[self.triangles[:, 0]]
        centers = (v0 + self.vertices[self.triangles[:, 1]]
                   + self.vertices[self.triangles[:, 2]]) / 3.0
        idx = int(np.argmin(np.linalg.norm(centers - p, axis=1)))
        tri = self.triangles[idx]
        n = np.cross(self.vertices[tri[1]] - self.vertices[tri[0]],
                     self.vertices[tri[2]] - self.vertices[tri[0]])
        return n / np.linalg.norm(n)


@dataclass
class SceneLayout:
    """Static scene configuration: cameras, tag registries, head model, targets.

    head_tags maps tag_id -> (tag frame -> head frame); the coil tag maps
    tag frame -> coil frame. Planned targets are named points on the
    head-model surface, in the head frame.
    """

    cameras: dict[str, CameraModel]
    head_tags: dict[int, RigidTransform]
    coil_tag_id: int
    coil_tag_transform: RigidTransform
    head_model: SphereHead | MeshHead
    planned_targets: dict[str, np.ndarray]
    tag_specs: dict[int, TagSpec]

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("layout needs at least one camera")
        if not self.head_tags:
            raise ValueError("layout needs at least one head tag")
        if self.coil_tag_id in self.head_tags:
            raise ValueError("tag ids must be unique across registries")
        for tag_id in list(self.head_tags) + [self.coil_tag_id]:
            if tag_id not in self.tag_specs:
                raise ValueError(f"no TagSpec registered for tag {tag_id}")
        positions = [t.translation for t in self.head_tags.values()]
        for i in range(len(positions)):
            for j in range(i + 1, len(positions)):
                if np.linalg.norm(positions[i] - positions[j]) < 1e-6:
                    raise ValueError("head-tag transforms must not coincide")
        self.planned_targets = {k: np.asarray(v, dtype=np.float64)
                                for k, v in self.planned_targets.items()}

    def tag_frame_to_body(self, tag_id: int) -> tuple[str, RigidTransform]:
        """Which body ('head' or 'coil') a tag belongs to, and its edge."""
        if tag_id in self.head_tags:
            return "head", self.head_tags[tag_id]
        if tag_id == self.coil_tag_id:
            return "coil", self.coil_tag_transform
        raise KeyError(f"tag {tag_id} not registered in layout")


@dataclass(frozen=True)
class HeadPose:
    """Fused body pose (head->world or coil->world) for one frame."""

    pose: RigidTransform
    tag_count: int
    sigma_t: np.ndarray
    rotation_dispersion_deg: float
    reduced_confidence: bool


CoilPose = HeadPose  # identical fields; the coil solve returns the same shape


@dataclass(frozen=True)
class TargetEstimate:
    """Stimulation point on the head model with guidance errors."""

    point_head: np.ndarray
    coil_in_head: RigidTransform
    target_name: str
    lateral_mm: float
    gap_mm: float
    tilt_deg: float
    sigma_mm: float

    def __post_init__(self):
        if self.lateral_mm < 0 or self.gap_mm < 0 or self.tilt_deg < 0:
            raise ValueError("alignment error components must be non-negative")


def _fuse_body_hypotheses(estimates: Sequence[PoseEstimate],
                          layout: SceneLayout,
                          body: str) -> HeadPose:
    hypotheses = []
    tags = set()
    for est in estimates:
        cam = layout.cameras[est.camera_id]
        kind, tag_to_body = layout.tag_frame_to_body(est.tag_id)
        if kind != body:
            continue
        tag_to_world = cam.extrinsic.compose(est.pose)
        body_to_world = tag_to_world.compose(tag_to_body.inverse())
        sigma_world = rotate_sigma(cam.extrinsic.rotation, est.sigma_t)
        hypotheses.append(WorldPoseHypothesis(body_to_world, sigma_world,
                                              est.sigma_distance))
        tags.add(est.tag_id)
    if not hypotheses:
        raise (NoHeadTags if body == "head" else NoCoilTag)(
            f"no {body}-tag estimates this frame")
    fused = fuse_world_hypotheses(hypotheses)
    sigma = fused.sigma_t
    if len(hypotheses) == 1:
        sigma = sigma * SINGLE_TAG_SIGMA_INFLATION
    return HeadPose(
        pose=fused.pose,
        tag_count=len(tags),
        sigma_t=sigma,
        rotation_dispersion_deg=fused.rotation_dispersion_deg,
        reduced_confidence=len(tags) < FULL_CONFIDENCE_TAG_COUNT,
    )


def solve_head_pose(estimates: Sequence[PoseEstimate],
                    layout: SceneLayout) -> HeadPose:
    """Fuse head-tag estimates into a head->world pose.

    Every (camera, head tag) estimate contributes one hypothesis through
    the tag->head registry. Frames with fewer than
    FULL_CONFIDENCE_TAG_COUNT distinct tags are flagged reduced-confidence;
    single-hypothesis frames get their sigmas inflated.

    Raises:
        NoHeadTags: no head-tag estimates among the inputs.
    """
    return _fuse_body_hypotheses(estimates, layout, "head")


def solve_coil_pose(estimates: Sequence[PoseEstimate],
                    layout: SceneLayout) -> CoilPose:
    """Fuse coil-tag estimates into a coil->world pose.

    Raises:
        NoCoilTag: no coil-tag estimates among the inputs.
    """
    return _fuse_body_hypotheses(estimates, layout, "coil")


def estimate_target(head: HeadPose, coil: CoilPose, layout: SceneLayout,
                    target_name: str | None = None,
                    ray_offset_mm: float = 0.0) -> TargetEstimate:
    """Cast the coil axis onto the head model and score the alignment.

    The stimulation ray starts at the coil center (optionally offset along
    the ray to account for coil thickness) and runs along the coil frame's
    -z axis. Its first intersection with the scalp surface, expressed in
    the head frame, is the stimulation point.

    Alignment errors against the active planned target p* with outward
    surface normal n*:

    - lateral: tangential offset of the stimulation point from p*;
    - gap: distance from the (offset) coil center to the surface hit;
    - tilt: angle between the ray and -n* (0 when pointing straight in).

    Raises:
        MissingPose: head or coil pose is None.
        NoIntersection: the ray misses the head model.
        KeyError: unknown target name.
    """
    if head is None or coil is None:
        raise MissingPose("target estimation requires both head and coil poses")
    if target_name is None:
        target_name = next(iter(layout.planned_targets))
    planned = layout.planned_targets[target_name]

    coil_in_head = head.pose.inverse().compose(coil.pose)
    direction = coil_in_head.rotation.apply(np.array([0.0, 0.0, -1.0]))
    origin = coil_in_head.translation + ray_offset_mm * direction
    t_hit = layout.head_model.intersect_ray(origin, direction)
    if t_hit is None:
        raise NoIntersection("coil axis does not intersect the head model")
    point = origin + t_hit * direction

    normal = layout.head_model.surface_normal(planned)
    offset = point - planned
    lateral = offset - float(offset @ normal) * normal
    tilt = math.degrees(math.acos(np.clip(float(direction @ -normal), -1.0, 1.0)))
    sigma = math.sqrt(float(head.sigma_t @ head.sigma_t)
                      + float(coil.sigma_t @ coil.sigma_t))
    return TargetEstimate(
        point_head=point,
        coil_in_head=coil_in_head,
        target_name=target_name,
        lateral_mm=float(np.linalg.norm(lateral)),
        gap_mm=float(t_hit),
        tilt_deg=tilt,
        sigma_mm=sigma,
    )


# --- layout document ------------------------------------------------------
#
# JSON schema (units: mm, deg where noted; quaternions ordered w, x, y, z):
# {
#   "cameras": {"<id>": {"fx","fy","cx","cy","distortion":[k1,k2,p1,p2,k3],
#                        "image_width","image_height",
#                        "extrinsic": {"q":[w,x,y,z], "t":[x,y,z]}}},
#   "head_tags": {"<tag_id>": {"q":..., "t":...}},      # tag -> head
#   "coil_tag": {"tag_id": n, "transform": {"q":..., "t":...}},  # tag -> coil
#   "head_model": {"kind":"sphere","radius":85.0,"center":[0,0,0]}
#               | {"kind":"mesh","vertices":[[...]],"triangles":[[...]]},
#   "planned_targets": {"<name>": [x, y, z]},           # head frame, on surface
#   "tag_size_mm": 24.0                                  # or "tag_sizes": {id: mm}
# }


def _transform_to_dict(t: RigidTransform) -> dict:
    return {"q": [float(v) for v in t.rotation.q],
            "t": [float(v) for v in t.translation]}


def _transform_from_dict(d: dict) -> RigidTransform:
    return RigidTransform(Rotation(np.array(d["q"], dtype=np.float64)),
                          np.array(d["t"], dtype=np.float64))


def layout_to_dict(layout: SceneLayout) -> dict:
    cams = {}
    for cid, cam in layout.cameras.items():
        cams[cid] = {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "distortion": [float(v) for v in cam.distortion],
            "image_width": cam.image_width, "image_height": cam.image_height,
            "extrinsic": _transform_to_dict(cam.extrinsic),
        }
    if isinstance(layout.head_model, SphereHead):
        model = {"kind": "sphere", "radius": layout.head_model.radius,
                 "center": [float(v) for v in layout.head_model.center]}
    else:
        model = {"kind": "mesh",
                 "vertices": layout.head_model.vertices.tolist(),
                 "triangles": layout.head_model.triangles.tolist()}
    return {
        "cameras": cams,
        "head_tags": {str(tid): _transform_to_dict(t)
                      for tid, t in layout.head_tags.items()},
        "coil_tag": {"tag_id": layout.coil_tag_id,
                     "transform": _transform_to_dict(layout.coil_tag_transform)},
        "head_model": model,
        "planned_targets": {k: [float(x) for x in v]
                            for k, v in layout.planned_targets.items()},
        "tag_sizes": {str(tid): spec.side_length
                      for tid, spec in layout.tag_specs.items()},
    }


def layout_from_dict(data: dict) -> SceneLayout:
    cameras = {}
    for cid, c in data["cameras"].items():
        cameras[cid] = CameraModel(
            fx=float(c["fx"]), fy=float(c["fy"]),
            cx=float(c["cx"]), cy=float(c["cy"]),
            distortion=np.array(c.get("distortion", [0.0] * 5), dtype=np.float64),
            image_width=int(c.get("image_width", 1920)),
            image_height=int(c.get("image_height", 1280)),
            extrinsic=_transform_from_dict(c["extrinsic"]),
            camera_id=cid,
        )
    head_tags = {int(tid): _transform_from_dict(t)
                 for tid, t in data["head_tags"].items()}
    coil_tag_id = int(data["coil_tag"]["tag_id"])
    coil_tag_transform = _transform_from_dict(data["coil_tag"]["transform"])
    m = data["head_model"]
    if m["kind"] == "sphere":
        model = SphereHead(radius=float(m["radius"]),
                           center=np.array(m.get("center", [0, 0, 0]), dtype=np.float64))
    elif m["kind"] == "mesh":
        model = MeshHead(np.array(m["vertices"], dtype=np.float64),
                         np.array(m["triangles"], dtype=np.int64))
    else:
        raise ValueError(f"unknown head model kind {m['kind']!r}")
    tag_ids = list(head_tags) + [coil_tag_id]
    if "tag_sizes" in data:
        sizes = {int(k): float(v) for k, v in data["tag_sizes"].items()}
    else:
        sizes = {tid: float(data.get("tag_size_mm", 24.0)) for tid in tag_ids}
    tag_specs = {tid: TagSpec(tag_id=tid, side_length=sizes[tid]) for tid in tag_ids}
    return SceneLayout(
        cameras=cameras,
        head_tags=head_tags,
        coil_tag_id=coil_tag_id,
        coil_tag_transform=coil_tag_transform,
        head_model=model,
        planned_targets={k: np.array(v, dtype=np.float64)
                         for k, v in data.get("planned_targets", {}).items()},
        tag_specs=tag_specs,
    )


def load_layout(path: str | Path) -> SceneLayout:
    with open(path, encoding="utf-8") as fh:
        return layout_from_dict(json.load(fh))


def save_layout(layout: SceneLayout, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(layout_to_dict(layout), fh, indent=2)
        fh.write("\n")
