"""Tests for the frame graph: head/coil solving and target estimation."""

import math

import numpy as np
import pytest

from navtrace.errors import (
    MissingPose,
    NoCoilTag,
    NoHeadTags,
    NoIntersection,
)
from navtrace.frames import (
    HeadPose,
    MeshHead,
    SceneLayout,
    SphereHead,
    estimate_target,
    layout_from_dict,
    layout_to_dict,
    solve_coil_pose,
    solve_head_pose,
)
from navtrace.geometry import RigidTransform, Rotation
from navtrace.pipeline import FramePipeline, group_by_frame
from navtrace.sim import SimConfig, default_scene_layout, simulate


@pytest.fixture(scope="module")
def layout() -> SceneLayout:
    return default_scene_layout()


def run_frame(layout, sigma, seed, occlusions=()):
    config = SimConfig(layout=layout, sigma_px=sigma, n_frames=1, seed=seed,
                       occlusions=list(occlusions))
    dets, truths = simulate(config)
    return dets, truths[0]


class TestSphereHead:
    def test_axis_aligned_intersection(self):
        sphere = SphereHead(radius=85.0)
        t = sphere.intersect_ray(np.array([0.0, 0.0, 120.0]),
                                 np.array([0.0, 0.0, -1.0]))
        assert abs(t - 35.0) < 1e-12

    def test_miss_returns_none(self):
        sphere = SphereHead(radius=85.0)
        assert sphere.intersect_ray(np.array([0.0, 0.0, 120.0]),
                                    np.array([0.0, 0.0, 1.0])) is None

    def test_tilted_ray_matches_quadratic_oracle(self):
        # independent line-sphere quadratic-root evaluation
        sphere = SphereHead(radius=85.0)
        rng = np.random.default_rng(50)
        for _ in range(100):
            origin = rng.normal(0, 30, 3) + np.array([0, 0, 150.0])
            d = rng.normal(0, 1, 3)
            d[2] = -abs(d[2]) - 0.5
            d = d / np.linalg.norm(d)
            a = 1.0
            b = 2.0 * float(origin @ d)
            c = float(origin @ origin) - 85.0 ** 2
            disc = b * b - 4 * a * c
            t = sphere.intersect_ray(origin, d)
            if disc < 0:
                assert t is None
                continue
            roots = [(-b - math.sqrt(disc)) / 2, (-b + math.sqrt(disc)) / 2]
            pos = [r for r in roots if r > 1e-9]
            if not pos:
                assert t is None
            else:
                assert abs(t - min(pos)) < 1e-9

    def test_surface_point_is_on_surface(self):
        sphere = SphereHead(radius=85.0)
        p = sphere.surface_point(-30.0, 40.0)
        assert abs(np.linalg.norm(p) - 85.0) < 1e-12


class TestMeshHead:
    def _tetra(self):
        v = np.array([[0, 0, 0], [100, 0, 0], [0, 100, 0], [0, 0, 100]],
                     dtype=float)
        t = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
        return MeshHead(v, t)

    def test_hits_nearest_face(self):
        mesh = self._tetra()
        t = mesh.intersect_ray(np.array([10.0, 10.0, 200.0]),
                               np.array([0.0, 0.0, -1.0]))
        # first hit is the slanted face x+y+z=100 at z=80
        assert abs(t - 120.0) < 1e-9

    def test_miss(self):
        mesh = self._tetra()
        assert mesh.intersect_ray(np.array([500.0, 500.0, 200.0]),
                                  np.array([0.0, 0.0, -1.0])) is None


class TestHeadPose:
    def test_noiseless_recovery(self, layout):
        dets, truth = run_frame(layout, 0.0, seed=1)
        pipe = FramePipeline(layout)
        estimates = pipe._solve_detections(dets, [])
        head = solve_head_pose(estimates, layout)
        assert np.linalg.norm(head.pose.translation
                              - truth.head_pose.translation) < 1e-6
        assert truth.head_pose.rotation.angle_to(head.pose.rotation) < 1e-6
        assert head.tag_count == 3  # back tag faces away from all cameras
        assert not head.reduced_confidence

    def test_no_head_tags_raises(self, layout):
        with pytest.raises(NoHeadTags):
            solve_head_pose([], layout)

    def test_coil_noiseless_recovery(self, layout):
        dets, truth = run_frame(layout, 0.0, seed=2)
        pipe = FramePipeline(layout)
        estimates = pipe._solve_detections(dets, [])
        coil = solve_coil_pose(estimates, layout)
        assert np.linalg.norm(coil.pose.translation
                              - truth.coil_pose.translation) < 1e-6
        assert truth.coil_pose.rotation.angle_to(coil.pose.rotation) < 1e-6

    def test_no_coil_tag_raises(self, layout):
        with pytest.raises(NoCoilTag):
            solve_coil_pose([], layout)

    def test_two_tags_reduced_confidence(self, layout):
        # occlude everything except the two cheekbone tags
        occl = [o for cam in layout.cameras
                for o in ([type("O", (), {})] and [])]
        from navtrace.sim import Occlusion
        occl = [Occlusion(cid, 3, 0, 10) for cid in layout.cameras]
        dets, truth = run_frame(layout, 0.0, seed=3, occlusions=occl)
        pipe = FramePipeline(layout)
        estimates = [e for e in pipe._solve_detections(dets, [])
                     if e.tag_id in layout.head_tags]
        head = solve_head_pose(estimates, layout)
        assert head.tag_count == 2
        assert head.reduced_confidence
        assert np.linalg.norm(head.pose.translation
                              - truth.head_pose.translation) < 1e-6

    def test_single_tag_sigma_inflated(self, layout):
        from navtrace.sim import Occlusion
        occl = ([Occlusion(cid, 3, 0, 10) for cid in layout.cameras]
                + [Occlusion(cid, 1, 0, 10) for cid in layout.cameras]
                + [Occlusion("cam1", 2, 0, 10), Occlusion("cam2", 2, 0, 10)])
        dets, _ = run_frame(layout, 0.05, seed=4, occlusions=occl)
        pipe = FramePipeline(layout)
        estimates = [e for e in pipe._solve_detections(dets, [])
                     if e.tag_id in layout.head_tags]
        assert len(estimates) == 1
        head = solve_head_pose(estimates, layout)
        assert head.tag_count == 1
        assert head.reduced_confidence

    def test_coil_single_camera_still_produces_pose(self, layout):
        # the coil tag faces two cameras in the default scene; occluding it
        # for one of them leaves a single-hypothesis (inflated-sigma) pose
        from navtrace.sim import Occlusion
        coil_id = layout.coil_tag_id
        base_dets, truth = run_frame(layout, 0.05, seed=14)
        seeing = {d.camera_id for d in base_dets if d.tag_id == coil_id}
        assert len(seeing) == 2
        drop = sorted(seeing)[0]
        dets, truth = run_frame(layout, 0.05, seed=14,
                                occlusions=[Occlusion(drop, coil_id, 0, 5)])
        pipe = FramePipeline(layout)
        estimates = pipe._solve_detections(dets, [])
        coil = solve_coil_pose(estimates, layout)
        assert coil.tag_count == 1
        assert coil.reduced_confidence
        assert np.linalg.norm(coil.pose.translation
                              - truth.coil_pose.translation) < 1.0

    def test_occluded_tag_degrades_less_than_2x(self, layout):
        # matched noise, one head tag occluded vs all visible
        from navtrace.sim import Occlusion
        sigma = 0.104
        n = 150
        errors_all, errors_drop = [], []
        for variant, occl in (("all", []),
                              ("drop", [Occlusion(cid, 3, 0, n)
                                        for cid in layout.cameras])):
            config = SimConfig(layout=layout, sigma_px=sigma, n_frames=n,
                               seed=11, occlusions=occl)
            dets, truths = simulate(config)
            pipe = FramePipeline(layout)
            groups = group_by_frame(dets)
            for fid, group in sorted(groups.items()):
                estimates = [e for e in pipe._solve_detections(group, [])
                             if e.tag_id in layout.head_tags]
                head = solve_head_pose(estimates, layout)
                err = np.linalg.norm(head.pose.translation
                                     - truths[fid].head_pose.translation)
                (errors_all if variant == "all" else errors_drop).append(err)
        assert np.mean(errors_drop) < 2.0 * np.mean(errors_all)


class TestEstimateTarget:
    def _head(self, pose=None, sigma=0.05):
        return HeadPose(pose=pose or RigidTransform.identity(), tag_count=4,
                        sigma_t=np.full(3, sigma),
                        rotation_dispersion_deg=0.01,
                        reduced_confidence=False)

    def _coil_at(self, position, direction):
        # coil -z axis along `direction`
        z = -np.asarray(direction, dtype=float)
        z = z / np.linalg.norm(z)
        ref = np.array([0.0, 1.0, 0.0])
        if abs(float(z @ ref)) > 0.95:
            ref = np.array([1.0, 0.0, 0.0])
        x = np.cross(ref, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = Rotation.from_matrix(np.stack([x, y, z], axis=1))
        return HeadPose(pose=RigidTransform(rot, np.asarray(position, float)),
                        tag_count=1, sigma_t=np.full(3, 0.05),
                        rotation_dispersion_deg=0.01, reduced_confidence=False)

    def test_axis_aligned_sphere(self, layout):
        head = self._head()
        coil = self._coil_at([0.0, 0.0, 120.0], [0.0, 0.0, -1.0])
        target_name = None
        # use a planned target exactly at (0, 0, 85)
        layout2 = default_scene_layout()
        layout2.planned_targets["apex"] = np.array([0.0, 0.0, 85.0])
        est = estimate_target(head, coil, layout2, target_name="apex")
        np.testing.assert_allclose(est.point_head, [0, 0, 85.0], atol=1e-9)
        assert est.lateral_mm < 1e-9
        assert abs(est.gap_mm - 35.0) < 1e-9
        assert est.tilt_deg < 1e-9

    def test_tilted_ray_matches_quadratic_oracle(self, layout):
        layout2 = default_scene_layout()
        layout2.planned_targets["apex"] = np.array([0.0, 0.0, 85.0])
        tilt = math.radians(10.0)
        rot = Rotation.from_axis_angle([1.0, 0.0, 0.0], tilt)
        base = self._coil_at([0.0, 0.0, 120.0], [0.0, 0.0, -1.0])
        coil = HeadPose(pose=RigidTransform(rot.compose(base.pose.rotation),
                                            base.pose.translation),
                        tag_count=1, sigma_t=np.full(3, 0.05),
                        rotation_dispersion_deg=0.0, reduced_confidence=False)
        est = estimate_target(self._head(), coil, layout2, target_name="apex")
        # oracle: solve the quadratic for the tilted ray directly
        d = rot.apply([0.0, 0.0, -1.0])
        o = np.array([0.0, 0.0, 120.0])
        b = 2 * float(o @ d)
        c = float(o @ o) - 85.0 ** 2
        t = (-b - math.sqrt(b * b - 4 * c)) / 2
        expected = o + t * d
        np.testing.assert_allclose(est.point_head, expected, atol=1e-9)
        assert abs(est.tilt_deg - 10.0) < 1e-9

    def test_stimulation_point_on_surface(self, layout):
        rng = np.random.default_rng(51)
        for _ in range(50):
            direction = -np.array([rng.normal(0, 0.2), rng.normal(0, 0.2), 1.0])
            coil = self._coil_at([rng.normal(0, 10), rng.normal(0, 10), 130.0],
                                 direction)
            try:
                est = estimate_target(self._head(), coil, layout)
            except NoIntersection:
                continue
            r = np.linalg.norm(est.point_head - layout.head_model.center)
            assert abs(r - layout.head_model.radius) < 1e-6

    def test_no_intersection(self, layout):
        coil = self._coil_at([0.0, 0.0, 120.0], [0.0, 0.0, 1.0])
        with pytest.raises(NoIntersection):
            estimate_target(self._head(), coil, layout)

    def test_missing_pose(self, layout):
        with pytest.raises(MissingPose):
            estimate_target(None, self._coil_at([0, 0, 120.0], [0, 0, -1.0]),
                            layout)

    def test_ray_offset_shortens_gap(self, layout):
        layout2 = default_scene_layout()
        layout2.planned_targets["apex"] = np.array([0.0, 0.0, 85.0])
        coil = self._coil_at([0.0, 0.0, 120.0], [0.0, 0.0, -1.0])
        est = estimate_target(self._head(), coil, layout2, target_name="apex",
                              ray_offset_mm=10.0)
        assert abs(est.gap_mm - 25.0) < 1e-9
        np.testing.assert_allclose(est.point_head, [0, 0, 85.0], atol=1e-9)


class TestGaugeInvariance:
    def test_world_motion_leaves_head_frame_target_unchanged(self):
        # rigidly move cameras and scene by G; the target estimate in the
        # head frame must not change
        g = RigidTransform(Rotation.from_rotvec([0.3, -0.2, 0.5]),
                           np.array([120.0, -40.0, 300.0]))
        base = default_scene_layout()
        moved = default_scene_layout()
        moved.cameras = {
            cid: type(cam)(
                fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                distortion=cam.distortion.copy(),
                image_width=cam.image_width, image_height=cam.image_height,
                extrinsic=g.compose(cam.extrinsic), camera_id=cid)
            for cid, cam in base.cameras.items()}

        results = []
        for layout, head_base in ((base, RigidTransform.identity()), (moved, g)):
            config = SimConfig(layout=layout, sigma_px=0.0, n_frames=1,
                               seed=5, head_base=head_base)
            dets, _ = simulate(config)
            pipe = FramePipeline(layout)
            result = pipe.process(0, dets)
            assert result.target is not None
            results.append(result.target.point_head)
        np.testing.assert_allclose(results[0], results[1], atol=1e-9)


class TestRedundancy:
    def test_single_tag_drop_bounded_degradation(self):
        # target error with any one visible head tag dropped stays within
        # 2x the all-tags error at matched noise
        layout = default_scene_layout()
        from navtrace.sim import Occlusion
        n = 120
        sigma = 0.104

        def mean_target_error(occlusions):
            config = SimConfig(layout=layout, sigma_px=sigma, n_frames=n,
                               seed=21, occlusions=occlusions)
            dets, truths = simulate(config)
            pipe = FramePipeline(layout)
            errors = []
            for fid, group in sorted(group_by_frame(dets).items()):
                result = pipe.process(fid, group)
                if result.target is None:
                    continue
                errors.append(np.linalg.norm(result.target.point_head
                                             - truths[fid].target_point))
            return float(np.mean(errors))

        base_err = mean_target_error([])
        for tag_id in (1, 2, 3):  # the visible head tags
            dropped = mean_target_error(
                [Occlusion(cid, tag_id, 0, n) for cid in layout.cameras])
            assert dropped < 2.0 * base_err, f"tag {tag_id}: {dropped} vs {base_err}"


class TestLayoutIO:
    def test_round_trip(self, tmp_path):
        layout = default_scene_layout()
        doc = layout_to_dict(layout)
        back = layout_from_dict(doc)
        assert sorted(back.cameras) == sorted(layout.cameras)
        for cid in layout.cameras:
            a, b = layout.cameras[cid], back.cameras[cid]
            assert a.fx == b.fx and a.cy == b.cy
            assert np.allclose(a.extrinsic.as_matrix(), b.extrinsic.as_matrix())
        assert back.coil_tag_id == layout.coil_tag_id
        assert sorted(back.head_tags) == sorted(layout.head_tags)
        assert sorted(back.planned_targets) == sorted(layout.planned_targets)
        assert back.head_model.radius == layout.head_model.radius
        for tid, spec in layout.tag_specs.items():
            assert back.tag_specs[tid].side_length == spec.side_length

    def test_validation(self):
        layout = default_scene_layout()
        doc = layout_to_dict(layout)
        doc["coil_tag"]["tag_id"] = 1  # collides with a head tag
        with pytest.raises(ValueError):
            layout_from_dict(doc)
