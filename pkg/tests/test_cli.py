"""Tests for the command-line interface (exit codes and artifacts)."""

import json
import subprocess
import sys

import numpy as np
import pytest

from navtrace.cli import main
from navtrace.calibration import write_observations
from navtrace.geometry import RigidTransform, Rotation, project_points

from test_calibration import synth_views


@pytest.fixture
def board_file(tmp_path):
    views, _ = synth_views(12, np.zeros(5), 0.1, seed=77)
    path = tmp_path / "views.ndjson"
    with open(path, "w") as fh:
        write_observations(views, fh)
    return path


class TestCalibrateCommand:
    def test_happy_path(self, board_file, tmp_path, capsys):
        out = tmp_path / "calib.json"
        code = main(["calibrate", "--input", str(board_file),
                     "--output", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert abs(report["camera"]["fx"] - 1507.0) / 1507.0 < 0.01
        assert report["mean_error_px"] < 0.2

    def test_missing_input_is_data_error(self, tmp_path, capsys):
        code = main(["calibrate", "--input", str(tmp_path / "nope"),
                     "--output", str(tmp_path / "o.json")])
        assert code == 2
        assert capsys.readouterr().err.startswith("error: data:")

    def test_degenerate_views_numeric_error(self, tmp_path, capsys):
        # parallel face-on boards: intrinsics unobservable
        from navtrace.calibration import CheckerboardObservation
        from test_calibration import BOARD, TRUE, board_points
        views = []
        base = board_points()
        for i in range(5):
            pose = RigidTransform(Rotation.identity(),
                                  np.array([-100.0 + 10 * i, -60.0, 520.0]))
            px = project_points(pose.apply_many(base), TRUE["fx"], TRUE["fy"],
                                TRUE["cx"], TRUE["cy"], np.zeros(5))
            views.append(CheckerboardObservation(f"d{i}", corners=px, **BOARD))
        path = tmp_path / "degen.ndjson"
        with open(path, "w") as fh:
            write_observations(views, fh)
        code = main(["calibrate", "--input", str(path),
                     "--output", str(tmp_path / "o.json")])
        assert code == 3
        assert capsys.readouterr().err.startswith("error: numeric:")

    def test_bad_image_size_usage_error(self, board_file, tmp_path, capsys):
        code = main(["calibrate", "--input", str(board_file),
                     "--output", str(tmp_path / "o.json"),
                     "--image-size", "huge"])
        assert code == 1


class TestSimulateTrackEvaluate:
    def test_simulate_then_track_then_evaluate(self, tmp_path, capsys):
        det = tmp_path / "det.ndjson"
        truth = tmp_path / "truth.ndjson"
        code = main(["simulate", "--frames", "5", "--sigma-px", "0",
                     "--seed", "3", "--target", "A2",
                     "--out-detections", str(det), "--out-truth", str(truth)])
        assert code == 0
        assert det.exists() and truth.exists()

        out = tmp_path / "frames.ndjson"
        code = main(["track", "--detections", str(det), "--output", str(out),
                     "--target", "A2"])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 5
        msg = json.loads(lines[0])
        assert msg["type"] == "frame"
        assert msg["head_pose"] is not None

        report_path = tmp_path / "report.json"
        code = main(["evaluate", "--detections", str(det), "--truth",
                     str(truth), "--output", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert "reprojection" in report
        errs = [r["target_error_mm"] for r in report["frame_records"]
                if "target_error_mm" in r]
        assert errs and max(errs) < 1e-6

    def test_stream_mismatch_is_data_error(self, tmp_path, capsys):
        det = tmp_path / "det.ndjson"
        truth = tmp_path / "truth.ndjson"
        main(["simulate", "--frames", "5", "--sigma-px", "0", "--seed", "3",
              "--out-detections", str(det), "--out-truth", str(truth)])
        capsys.readouterr()  # discard the simulate step's output
        # drop the last truth records so frame ids no longer align
        lines = truth.read_text().strip().splitlines()
        truth.write_text("\n".join(lines[:2]) + "\n")
        code = main(["evaluate", "--detections", str(det), "--truth",
                     str(truth), "--output", str(tmp_path / "r.json")])
        assert code == 2
        assert capsys.readouterr().err.startswith("error: data:")

    def test_missing_required_args_usage(self, tmp_path, capsys):
        code = main(["evaluate", "--output", str(tmp_path / "r.json")])
        assert code == 1

    def test_unknown_command_usage(self, capsys):
        code = main(["frobnicate"])
        assert code == 1


class TestLayoutRoundTripViaCli:
    def test_custom_layout_file(self, tmp_path):
        from navtrace.frames import save_layout
        from navtrace.sim import default_scene_layout
        layout_path = tmp_path / "layout.json"
        save_layout(default_scene_layout(), layout_path)
        det = tmp_path / "det.ndjson"
        truth = tmp_path / "truth.ndjson"
        code = main(["simulate", "--layout", str(layout_path), "--frames", "2",
                     "--sigma-px", "0", "--out-detections", str(det),
                     "--out-truth", str(truth)])
        assert code == 0


class TestEntryPoint:
    def test_module_help(self):
        proc = subprocess.run([sys.executable, "-m", "navtrace.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for command in ("calibrate", "simulate", "track", "serve", "evaluate"):
            assert command in proc.stdout
