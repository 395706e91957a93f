"""Command-line entry point: calibrate, simulate, track, serve, evaluate.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure. Errors
print a single machine-parsable line to stderr: ``error: <code>: <reason>``.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
import warnings

import numpy as np

from . import calibration, evaluate as ev, frames, pose, sim, stream
from .errors import (
    DegenerateViews,
    DivergedRefinement,
    Diverged,
    NavtraceError,
    NoConvergence,
    StreamMismatch,
    TooFewViews,
)
from .pipeline import PipelineConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_NUMERIC_ERRORS = (DegenerateViews, DivergedRefinement, Diverged,
                   NoConvergence, TooFewViews)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(_fail(EXIT_USAGE, message))


def _fail(code: int, reason: str) -> int:
    label = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}[code]
    print(f"error: {label}: {reason}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="navtrace",
                     description="Multi-camera optical-tag tracking engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="intrinsics from checkerboard views")
    p.add_argument("--input", required=True, help="board_view record file")
    p.add_argument("--output", required=True, help="calibration report (JSON)")
    p.add_argument("--image-size", default="1920x1280",
                   help="sensor size WxH in px (default 1920x1280)")
    p.add_argument("--camera-id", default="cam0")

    p = sub.add_parser("simulate", help="generate detection + truth streams")
    p.add_argument("--config", help="simulation config JSON (optional)")
    p.add_argument("--layout", help="scene layout JSON (default built-in)")
    p.add_argument("--out-detections")
    p.add_argument("--out-truth")
    p.add_argument("--live", action="store_true",
                   help="feed the telemetry service directly instead of files")
    p.add_argument("--port", type=int, default=9750, help="--live TCP port")
    p.add_argument("--ws-port", type=int, default=9751,
                   help="--live WebSocket port")
    p.add_argument("--frames", type=int, default=100,
                   help="frame count (0 = unbounded in --live mode)")
    p.add_argument("--rate", type=float, default=30.0)
    p.add_argument("--sigma-px", type=float, default=sim.TUNED_SIGMA_PX)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--motion", action="store_true",
                   help="enable head sway + coil tremor")
    p.add_argument("--target", default=None, help="planned target name")

    p = sub.add_parser("track", help="offline replay: detections -> frame messages")
    p.add_argument("--detections", required=True)
    p.add_argument("--layout", help="scene layout JSON (default built-in)")
    p.add_argument("--cameras", nargs="*", default=[],
                   help="calibration report files overriding layout cameras")
    p.add_argument("--output", default="-", help="frame message file or - (stdout)")
    p.add_argument("--target", default=None)

    p = sub.add_parser("serve", help="run the real-time telemetry service")
    p.add_argument("--layout", help="scene layout JSON (default built-in)")
    p.add_argument("--cameras", nargs="*", default=[])
    p.add_argument("--source", choices=("sim", "file", "socket"), default="sim")
    p.add_argument("--detections", help="detection file for --source file")
    p.add_argument("--ingest-port", type=int, default=9749,
                   help="detection-record TCP port for --source socket")
    p.add_argument("--port", type=int, default=9750)
    p.add_argument("--ws-port", type=int, default=9751)
    p.add_argument("--frames", type=int, default=0,
                   help="stop after N frames (0 = run until killed)")
    p.add_argument("--rate", type=float, default=30.0)
    p.add_argument("--sigma-px", type=float, default=sim.TUNED_SIGMA_PX)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", default=None)

    p = sub.add_parser("evaluate", help="offline analyses against ground truth")
    p.add_argument("--detections")
    p.add_argument("--truth")
    p.add_argument("--layout", help="scene layout JSON (default built-in)")
    p.add_argument("--cameras", nargs="*", default=[])
    p.add_argument("--preset", choices=("none", "reprojection", "five-position",
                                        "targets", "full"),
                   default="none",
                   help="built-in experiment presets (generate their own data)")
    p.add_argument("--output", required=True, help="report JSON path")
    p.add_argument("--plots", help="directory for SVG plots (optional)")
    p.add_argument("--sigma-px", type=float, default=sim.TUNED_SIGMA_PX)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_layout(path: str | None) -> frames.SceneLayout:
    if path is None:
        return sim.default_scene_layout()
    return frames.load_layout(path)


def _load_cameras(paths: list[str], layout: frames.SceneLayout) -> dict | None:
    if not paths:
        return None
    cams = {}
    for path in paths:
        cam = calibration.load_camera(path)
        base = layout.cameras.get(cam.camera_id)
        if base is None:
            raise ValueError(f"calibrated camera {cam.camera_id!r} "
                             f"is not in the layout")
        # calibration reports carry no extrinsic; keep the layout's
        cams[cam.camera_id] = calibration.CameraModel(
            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            distortion=cam.distortion, image_width=cam.image_width,
            image_height=cam.image_height, extrinsic=base.extrinsic,
            camera_id=cam.camera_id)
    merged = dict(layout.cameras)
    merged.update(cams)
    return merged


def _cmd_calibrate(args) -> int:
    try:
        with open(args.input, encoding="utf-8") as fh:
            observations = calibration.read_observations(fh)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, f"cannot read observations: {exc}")
    try:
        width, height = (int(v) for v in args.image_size.lower().split("x"))
    except ValueError:
        return _fail(EXIT_USAGE, f"bad --image-size {args.image_size!r}")
    try:
        report = calibration.calibrate(observations, (width, height),
                                       camera_id=args.camera_id)
    except _NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    calibration.save_report(report, args.output)
    print(f"calibrated {args.camera_id}: fx={report.camera.fx:.2f} "
          f"fy={report.camera.fy:.2f} mean_error={report.mean_error_px:.4f} px "
          f"({len(observations)} views)")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    try:
        layout = _load_layout(args.layout)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, f"cannot load layout: {exc}")
    config = sim.SimConfig(
        layout=layout,
        sigma_px=args.sigma_px,
        n_frames=args.frames,
        seed=args.seed,
        frame_rate_hz=args.rate,
        motion=sim.MotionParams() if args.motion else None,
        target_name=args.target,
    )
    if args.live:
        source = stream.LiveSimSource(config)
        server = stream.TelemetryServer(
            layout, source, PipelineConfig(target_name=args.target),
            port=args.port, ws_port=args.ws_port)
        print(f"live sim -> tcp://0.0.0.0:{args.port} "
              f"ws://0.0.0.0:{args.ws_port}", flush=True)
        try:
            asyncio.run(server.run())
        except KeyboardInterrupt:
            pass
        return EXIT_OK
    if not args.out_detections or not args.out_truth:
        return _fail(EXIT_USAGE,
                     "simulate needs --out-detections and --out-truth "
                     "(or --live)")
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            return _fail(EXIT_DATA, f"cannot read config: {exc}")
        for key in ("sigma_px", "n_frames", "frame_rate_hz", "seed",
                    "target_name"):
            if key in overrides:
                setattr(config, key, overrides[key])
        if overrides.get("occlusions"):
            config.occlusions = [sim.Occlusion(**o)
                                 for o in overrides["occlusions"]]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        detections, truths = sim.simulate(config)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    with open(args.out_detections, "w", encoding="utf-8") as fh:
        pose.write_detections(detections, fh)
    with open(args.out_truth, "w", encoding="utf-8") as fh:
        sim.write_truths(truths, fh)
    print(f"simulated {config.n_frames} frames -> {len(detections)} detections")
    return EXIT_OK


def _cmd_track(args) -> int:
    try:
        layout = _load_layout(args.layout)
        cameras = _load_cameras(args.cameras, layout)
        with open(args.detections, encoding="utf-8") as fh:
            detections = list(pose.read_detections(fh))
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, str(exc))
    if cameras:
        layout.cameras = cameras
    from .pipeline import FramePipeline, group_by_frame
    pipe = FramePipeline(layout, PipelineConfig(target_name=args.target))
    out = sys.stdout if args.output == "-" else open(args.output, "w",
                                                     encoding="utf-8")
    try:
        for fid, dets in sorted(group_by_frame(detections).items()):
            result = pipe.process(fid, dets)
            msg = stream.frame_message_from_result(result)
            out.write(stream.encode_frame_message(msg).decode("ascii") + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _cmd_serve(args) -> int:
    try:
        layout = _load_layout(args.layout)
        cameras = _load_cameras(args.cameras, layout)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, str(exc))
    if cameras:
        layout.cameras = cameras
    if args.source == "file":
        if not args.detections:
            return _fail(EXIT_USAGE, "--source file requires --detections")
        try:
            with open(args.detections, encoding="utf-8") as fh:
                detections = list(pose.read_detections(fh))
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            return _fail(EXIT_DATA, str(exc))
        source = stream.FileReplaySource(detections, frame_rate_hz=args.rate,
                                         realtime=True)
    elif args.source == "socket":
        source = stream.SocketIngestSource("0.0.0.0", args.ingest_port)
    else:
        config = sim.SimConfig(layout=layout, sigma_px=args.sigma_px,
                               n_frames=args.frames, seed=args.seed,
                               frame_rate_hz=args.rate,
                               target_name=args.target)
        source = stream.LiveSimSource(config)
    server = stream.TelemetryServer(
        layout, source,
        PipelineConfig(target_name=args.target),
        port=args.port, ws_port=args.ws_port)
    print(f"serving tcp://0.0.0.0:{args.port} ws://0.0.0.0:{args.ws_port}",
          flush=True)
    try:
        asyncio.run(server.run())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    report = ev.EvaluationReport()
    try:
        if args.preset in ("reprojection", "full"):
            report.reprojection = ev.reprojection_sweep(
                sigma_px=args.sigma_px, seed=args.seed)
        if args.preset in ("five-position", "full"):
            report.precision = ev.run_precision_protocol(
                sigma_px=args.sigma_px, seed=args.seed)
        if args.preset in ("targets", "full"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                target_report, _ = ev.run_target_grid(
                    sigma_px=args.sigma_px, seed=args.seed)
            report.targets = target_report.targets
            report.latency_ms.extend(target_report.latency_ms)
            report.frame_records.extend(target_report.frame_records)
        if args.preset == "none":
            if not (args.detections and args.truth):
                return _fail(EXIT_USAGE,
                             "--preset none requires --detections and --truth")
            layout = _load_layout(args.layout)
            cameras = _load_cameras(args.cameras, layout)
            with open(args.detections, encoding="utf-8") as fh:
                detections = list(pose.read_detections(fh))
            with open(args.truth, encoding="utf-8") as fh:
                truths = list(sim.read_truths(fh))
            report = ev.evaluate(detections, truths, layout, cameras=cameras)
    except StreamMismatch as exc:
        return _fail(EXIT_DATA, str(exc))
    except _NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, str(exc))
    ev.save_report(report, args.output)
    if args.plots:
        try:
            written = ev.write_plots(report, args.plots)
        except ImportError:
            return _fail(EXIT_DATA,
                         "plot output requires matplotlib (pip install navtrace[plots])")
        print(f"wrote {len(written)} plots to {args.plots}")
    print(f"report written to {args.output}")
    return EXIT_OK


_COMMANDS = {
    "calibrate": _cmd_calibrate,
    "simulate": _cmd_simulate,
    "track": _cmd_track,
    "serve": _cmd_serve,
    "evaluate": _cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except NavtraceError as exc:
        return _fail(EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
