"""Per-frame processing: group detections, solve poses, fuse, cast target.

Shared by the streaming service and the offline track/evaluate harness so
both paths produce identical numbers for identical inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .errors import (
    BadCorners,
    Diverged,
    MissingPose,
    NavtraceError,
    NoCoilTag,
    NoHeadTags,
    NoIntersection,
)
from .frames import (
    CoilPose,
    HeadPose,
    SceneLayout,
    TargetEstimate,
    estimate_target,
    solve_coil_pose,
    solve_head_pose,
)
from .pose import PoseEstimate, TagDetection, solve_tag_pose

CAMERA_TRACKED = "tracked"
CAMERA_OCCLUDED = "occluded"
CAMERA_STALE = "stale"


@dataclass
class PipelineConfig:
    use_fy_correction: bool = False
    stale_window_frames: int = 2
    target_name: str | None = None
    coil_ray_offset_mm: float = 0.0
    # drop flagged-ambiguous estimates when unambiguous ones cover the tag
    prefer_unambiguous: bool = True


@dataclass
class FrameResult:
    frame_id: int
    timestamp_ms: float
    estimates: list[PoseEstimate]
    head: HeadPose | None
    coil: CoilPose | None
    target: TargetEstimate | None
    camera_status: dict[str, str]
    errors: list[str] = field(default_factory=list)
    latency_ms: float = 0.0


class FramePipeline:
    """Stateful frame processor (tracks per-camera freshness between frames)."""

    def __init__(self, layout: SceneLayout, config: PipelineConfig | None = None):
        self.layout = layout
        self.config = config or PipelineConfig()
        self._last_seen: dict[str, int] = {}

    def select_target(self, name: str) -> None:
        if name not in self.layout.planned_targets:
            raise KeyError(f"unknown planned target {name!r}")
        self.config.target_name = name

    def _solve_detections(self, detections: list[TagDetection],
                          errors: list[str]) -> list[PoseEstimate]:
        estimates: list[PoseEstimate] = []
        for det in detections:
            spec = self.layout.tag_specs.get(det.tag_id)
            if spec is None:
                errors.append(f"unknown tag {det.tag_id}")
                continue
            try:
                estimates.append(solve_tag_pose(
                    self.layout.cameras[det.camera_id], spec, det,
                    use_fy_correction=self.config.use_fy_correction))
            except (BadCorners, Diverged, KeyError) as exc:
                errors.append(f"solve {det.camera_id}/tag{det.tag_id}: {exc}")
        if self.config.prefer_unambiguous:
            clean_tags = {e.tag_id for e in estimates if not e.ambiguous}
            estimates = [e for e in estimates
                         if not e.ambiguous or e.tag_id not in clean_tags]
        return estimates

    def process(self, frame_id: int, detections: list[TagDetection],
                timestamp_ms: float | None = None) -> FrameResult:
        """Run solve -> fuse -> target for one frame's detections.

        Pipeline errors are collected into the result, never raised; a
        frame with no usable detections still yields a (poseless) result.
        """
        start = time.perf_counter()
        if timestamp_ms is None:
            timestamp_ms = detections[0].timestamp_ms if detections else 0.0
        errors: list[str] = []
        estimates = self._solve_detections(detections, errors)

        head = coil = target = None
        try:
            head = solve_head_pose(estimates, self.layout)
        except NoHeadTags as exc:
            errors.append(str(exc))
        try:
            coil = solve_coil_pose(estimates, self.layout)
        except NoCoilTag as exc:
            errors.append(str(exc))
        if head is not None and coil is not None:
            try:
                target = estimate_target(
                    head, coil, self.layout,
                    target_name=self.config.target_name,
                    ray_offset_mm=self.config.coil_ray_offset_mm)
            except (NoIntersection, MissingPose, KeyError, NavtraceError) as exc:
                errors.append(f"target: {exc}")

        for det in detections:
            self._last_seen[det.camera_id] = frame_id
        status = {}
        for cid in self.layout.cameras:
            last = self._last_seen.get(cid)
            if last == frame_id:
                status[cid] = CAMERA_TRACKED
            elif last is not None and frame_id - last <= self.config.stale_window_frames:
                status[cid] = CAMERA_OCCLUDED
            else:
                status[cid] = CAMERA_STALE

        latency_ms = (time.perf_counter() - start) * 1000.0
        return FrameResult(
            frame_id=frame_id,
            timestamp_ms=timestamp_ms,
            estimates=estimates,
            head=head,
            coil=coil,
            target=target,
            camera_status=status,
            errors=errors,
            latency_ms=latency_ms,
        )


def group_by_frame(detections: list[TagDetection]) -> dict[int, list[TagDetection]]:
    """Group a detection list by frame_id, ordered by (frame, camera, tag)."""
    groups: dict[int, list[TagDetection]] = {}
    for det in sorted(detections,
                      key=lambda d: (d.frame_id, d.camera_id, d.tag_id)):
        groups.setdefault(det.frame_id, []).append(det)
    return groups
