"""Real-time telemetry service: ingest detections, run the pipeline, publish.

Wire format (original design; the upstream system's link schema is not
published): one JSON object per message, canonical encoding so the raw TCP
endpoint and the WebSocket endpoint carry bit-identical payload bytes.

Canonical encoding rules:

- object keys in fixed schema order (as documented per message type);
- no whitespace;
- numbers: integers bare; floats as fixed-point with at most 9 decimals,
  trailing zeros stripped ("1.5", "0.000000001", "42"); -0 encodes as 0;
  magnitudes >= 1e9 are out of schema bounds.

FrameMessage keys: type("frame"), frame_id, timestamp_ms, head_pose{q,t},
coil_pose{q,t}, target[x,y,z], alignment{lateral_mm,gap_mm,tilt_deg},
sigma_mm, cameras{id:status}, latency_ms. Quaternions are (w, x, y, z);
translations mm; pose fields null while tracking is lost.

ControlMessage keys: type("control"), command, then command fields:
  select_target(name); coil_delta(dt[3] mm, drot_deg[3], applied in the
  head frame; live simulator source only); pause; resume;
  set_options(use_fy_correction?, stale_window_frames?).
Deltas are bounded: ||dt|| <= 50 mm, ||drot|| <= 30 deg per message.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import AsyncIterator, Awaitable, Callable, Protocol

import numpy as np
import websockets

from .frames import SceneLayout
from .geometry import RigidTransform, Rotation
from .pipeline import FramePipeline, FrameResult, PipelineConfig
from .pose import TagDetection, detection_from_record
from .sim import SimConfig, project_frame

log = logging.getLogger("navtrace.stream")
log.setLevel(os.environ.get("NAVTRACE_LOG", "WARNING").upper())

MAX_DELTA_T_MM = 50.0
MAX_DELTA_ROT_DEG = 30.0
QUAT_NORM_SLACK = 1e-3


# --- canonical encoding -----------------------------------------------------


def format_number(x) -> str:
    if isinstance(x, bool):
        raise TypeError("bool is not a wire number")
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    v = float(x)
    if not math.isfinite(v):
        raise ValueError("non-finite number in wire message")
    if abs(v) >= 1e9:
        raise ValueError(f"number {v!r} exceeds wire schema bounds")
    s = f"{v:.9f}".rstrip("0").rstrip(".")
    if s in ("-0", ""):
        s = "0"
    return s


def _escape(s: str) -> str:
    out = []
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return "".join(out)


def encode_canonical(obj) -> str:
    """Serialize to canonical JSON (dict insertion order preserved)."""
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, str):
        return f'"{_escape(obj)}"'
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return format_number(obj)
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(encode_canonical(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(f'"{_escape(str(k))}":{encode_canonical(v)}'
                              for k, v in obj.items()) + "}"
    raise TypeError(f"cannot encode {type(obj)!r}")


# --- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class PoseWire:
    q: np.ndarray  # (w, x, y, z)
    t: np.ndarray  # mm

    @classmethod
    def from_transform(cls, tf: RigidTransform) -> "PoseWire":
        return cls(q=np.asarray(tf.rotation.q), t=np.asarray(tf.translation))

    def to_transform(self) -> RigidTransform:
        return RigidTransform(Rotation(self.q), self.t)


@dataclass(frozen=True)
class FrameMessage:
    frame_id: int
    timestamp_ms: float
    head_pose: PoseWire | None
    coil_pose: PoseWire | None
    target: np.ndarray | None
    alignment: dict | None  # lateral_mm, gap_mm, tilt_deg
    sigma_mm: float | None
    cameras: dict[str, str]
    latency_ms: float


def encode_frame_message(msg: FrameMessage) -> bytes:
    def pose(p: PoseWire | None):
        if p is None:
            return None
        return {"q": list(p.q), "t": list(p.t)}

    doc = {
        "type": "frame",
        "frame_id": msg.frame_id,
        "timestamp_ms": msg.timestamp_ms,
        "head_pose": pose(msg.head_pose),
        "coil_pose": pose(msg.coil_pose),
        "target": list(msg.target) if msg.target is not None else None,
        "alignment": (
            {"lateral_mm": msg.alignment["lateral_mm"],
             "gap_mm": msg.alignment["gap_mm"],
             "tilt_deg": msg.alignment["tilt_deg"]}
            if msg.alignment is not None else None),
        "sigma_mm": msg.sigma_mm,
        "cameras": {k: msg.cameras[k] for k in sorted(msg.cameras)},
        "latency_ms": msg.latency_ms,
    }
    return encode_canonical(doc).encode("ascii")


def _decode_pose(d: dict | None) -> PoseWire | None:
    if d is None:
        return None
    q = np.array(d["q"], dtype=np.float64)
    if q.shape != (4,) or abs(float(np.linalg.norm(q)) - 1.0) > QUAT_NORM_SLACK:
        raise ValueError("pose quaternion is not near-unit")
    t = np.array(d["t"], dtype=np.float64)
    if t.shape != (3,) or not np.all(np.isfinite(t)):
        raise ValueError("pose translation malformed")
    # construct a Rotation so the unit-norm invariant is enforced
    return PoseWire(q=Rotation(q).q, t=t)


def decode_frame_message(payload: bytes | str) -> FrameMessage:
    data = json.loads(payload)
    if data.get("type") != "frame":
        raise ValueError("not a frame message")
    target = data.get("target")
    return FrameMessage(
        frame_id=int(data["frame_id"]),
        timestamp_ms=float(data["timestamp_ms"]),
        head_pose=_decode_pose(data.get("head_pose")),
        coil_pose=_decode_pose(data.get("coil_pose")),
        target=np.array(target, dtype=np.float64) if target is not None else None,
        alignment=data.get("alignment"),
        sigma_mm=(float(data["sigma_mm"])
                  if data.get("sigma_mm") is not None else None),
        cameras=dict(data["cameras"]),
        latency_ms=float(data["latency_ms"]),
    )


def frame_message_from_result(result: FrameResult) -> FrameMessage:
    head = PoseWire.from_transform(result.head.pose) if result.head else None
    coil = PoseWire.from_transform(result.coil.pose) if result.coil else None
    target = alignment = None
    sigma = None
    if result.target is not None:
        target = result.target.point_head
        alignment = {
            "lateral_mm": result.target.lateral_mm,
            "gap_mm": result.target.gap_mm,
            "tilt_deg": result.target.tilt_deg,
        }
        sigma = result.target.sigma_mm
    elif result.head is not None and result.coil is not None:
        sigma = math.sqrt(float(result.head.sigma_t @ result.head.sigma_t)
                          + float(result.coil.sigma_t @ result.coil.sigma_t))
    return FrameMessage(
        frame_id=result.frame_id,
        timestamp_ms=result.timestamp_ms,
        head_pose=head,
        coil_pose=coil,
        target=target,
        alignment=alignment,
        sigma_mm=sigma,
        cameras=result.camera_status,
        latency_ms=result.latency_ms,
    )


@dataclass(frozen=True)
class ControlMessage:
    command: str
    name: str | None = None
    dt: np.ndarray | None = None
    drot_deg: np.ndarray | None = None
    options: dict | None = None


def decode_control_message(payload: bytes | str) -> ControlMessage:
    data = json.loads(payload)
    if data.get("type") != "control":
        raise ValueError("not a control message")
    command = data.get("command")
    if command == "select_target":
        name = data.get("name")
        if not isinstance(name, str) or not name:
            raise ValueError("select_target needs a target name")
        return ControlMessage(command=command, name=name)
    if command == "coil_delta":
        dt = np.array(data.get("dt", [0.0, 0.0, 0.0]), dtype=np.float64)
        drot = np.array(data.get("drot_deg", [0.0, 0.0, 0.0]), dtype=np.float64)
        if dt.shape != (3,) or drot.shape != (3,):
            raise ValueError("coil_delta needs dt[3] and drot_deg[3]")
        if float(np.linalg.norm(dt)) > MAX_DELTA_T_MM:
            raise ValueError(f"||dt|| exceeds {MAX_DELTA_T_MM} mm bound")
        if float(np.linalg.norm(drot)) > MAX_DELTA_ROT_DEG:
            raise ValueError(f"||drot|| exceeds {MAX_DELTA_ROT_DEG} deg bound")
        return ControlMessage(command=command, dt=dt, drot_deg=drot)
    if command in ("pause", "resume"):
        return ControlMessage(command=command)
    if command == "set_options":
        opts = {}
        if "use_fy_correction" in data:
            opts["use_fy_correction"] = bool(data["use_fy_correction"])
        if "stale_window_frames" in data:
            w = int(data["stale_window_frames"])
            if w < 0:
                raise ValueError("stale window must be >= 0")
            opts["stale_window_frames"] = w
        return ControlMessage(command=command, options=opts)
    raise ValueError(f"unknown control command {command!r}")


# --- ingestion ----------------------------------------------------------------


class FrameGrouper:
    """Re-orders detection records into per-frame groups.

    Records are buffered until the watermark (highest frame_id seen) moves
    more than ``window_frames`` past them; groups are then emitted sorted
    by (frame_id, camera_id, tag_id). Records arriving after their group
    was emitted are dropped and counted.
    """

    def __init__(self, window_frames: int = 1):
        self.window_frames = window_frames
        self.pending: dict[int, list[TagDetection]] = {}
        self.watermark: int | None = None
        self.emitted_up_to: int | None = None
        self.dropped = 0

    def push(self, det: TagDetection) -> list[tuple[int, list[TagDetection]]]:
        if self.emitted_up_to is not None and det.frame_id <= self.emitted_up_to:
            self.dropped += 1
            return []
        self.pending.setdefault(det.frame_id, []).append(det)
        if self.watermark is None or det.frame_id > self.watermark:
            self.watermark = det.frame_id
        ready = []
        cutoff = self.watermark - self.window_frames
        for fid in sorted(self.pending):
            if fid < cutoff:
                ready.append((fid, self._take(fid)))
        return ready

    def flush(self) -> list[tuple[int, list[TagDetection]]]:
        return [(fid, self._take(fid)) for fid in sorted(self.pending)]

    def _take(self, fid: int) -> list[TagDetection]:
        group = sorted(self.pending.pop(fid),
                       key=lambda d: (d.camera_id, d.tag_id))
        self.emitted_up_to = fid if self.emitted_up_to is None \
            else max(self.emitted_up_to, fid)
        return group


# --- sources -------------------------------------------------------------------


class DetectionSource(Protocol):
    def frames(self) -> AsyncIterator[tuple[int, float, list[TagDetection]]]:
        ...


class FileReplaySource:
    """Replay a detection stream file, optionally paced at the frame rate."""

    def __init__(self, detections: list[TagDetection],
                 frame_rate_hz: float = 30.0, realtime: bool = False):
        self.detections = detections
        self.frame_rate_hz = frame_rate_hz
        self.realtime = realtime

    async def frames(self):
        grouper = FrameGrouper()
        groups: list[tuple[int, list[TagDetection]]] = []
        for det in self.detections:
            groups.extend(grouper.push(det))
        groups.extend(grouper.flush())
        period = 1.0 / self.frame_rate_hz
        for fid, dets in groups:
            ts = dets[0].timestamp_ms if dets else fid * period * 1000.0
            yield fid, ts, dets
            if self.realtime:
                await asyncio.sleep(period)


class SocketIngestSource:
    """Accept detection records over TCP (one JSON record per line)."""

    def __init__(self, host: str, port: int, window_frames: int = 1):
        self.host = host
        self.port = port
        self.grouper = FrameGrouper(window_frames)
        self.queue: asyncio.Queue = asyncio.Queue()
        self.malformed = 0
        self._server: asyncio.AbstractServer | None = None

    async def start(self):
        self._server = await asyncio.start_server(self._handle, self.host,
                                                  self.port)

    async def _handle(self, reader: asyncio.StreamReader,
                      writer: asyncio.StreamWriter):
        try:
            async for line in reader:
                line = line.strip()
                if not line:
                    continue
                try:
                    det = detection_from_record(json.loads(line))
                except (ValueError, KeyError, json.JSONDecodeError) as exc:
                    self.malformed += 1
                    log.warning("malformed detection record dropped: %s", exc)
                    continue
                for group in self.grouper.push(det):
                    await self.queue.put(group)
        finally:
            writer.close()

    async def frames(self):
        if self._server is None:
            await self.start()
        while True:
            fid, dets = await self.queue.get()
            ts = dets[0].timestamp_ms if dets else 0.0
            yield fid, ts, dets


class LiveSimSource:
    """Generate frames from the simulator in real time, steerable by
    coil_delta control messages (deltas applied to the coil base pose in
    the head frame)."""

    def __init__(self, config: SimConfig, realtime: bool = True):
        self.config = config
        self.realtime = realtime
        self.layout = config.layout
        self.head_base = config.head_base
        self.coil_in_head = config.resolved_coil_base()
        self.frame_id = 0
        cam_ids = sorted(self.layout.cameras)
        seeds = np.random.SeedSequence(config.seed).spawn(len(cam_ids) + 1)
        self._cam_rngs = {cid: np.random.default_rng(s)
                          for cid, s in zip(cam_ids, seeds[1:])}

    def apply_delta(self, dt: np.ndarray, drot_deg: np.ndarray) -> None:
        ang = math.radians(float(np.linalg.norm(drot_deg)))
        rot = (Rotation.from_axis_angle(drot_deg, ang)
               if ang > 1e-12 else Rotation.identity())
        self.coil_in_head = RigidTransform(
            rot.compose(self.coil_in_head.rotation),
            self.coil_in_head.translation + dt)

    def true_poses(self) -> tuple[RigidTransform, RigidTransform]:
        head = self.head_base
        coil = head.compose(self.coil_in_head)
        return head, coil

    async def frames(self):
        period = 1.0 / self.config.frame_rate_hz
        loop = asyncio.get_running_loop()
        next_tick = loop.time()
        while self.config.n_frames <= 0 or self.frame_id < self.config.n_frames:
            head, coil = self.true_poses()
            ts = self.frame_id * period * 1000.0
            dets, _ = project_frame(
                self.layout, head, coil, self.frame_id, ts,
                self.config.sigma_px, self._cam_rngs, self.config.occlusions)
            yield self.frame_id, ts, dets
            self.frame_id += 1
            if self.realtime:
                next_tick += period
                delay = next_tick - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    next_tick = loop.time()


# --- server ---------------------------------------------------------------------


class _Subscriber:
    """Latest-wins mailbox: a slow consumer drops old frames, never stalls
    the pipeline, and always observes increasing frame ids."""

    def __init__(self, send: Callable[[bytes], Awaitable[None]]):
        self.send = send
        self._latest: bytes | None = None
        self._event = asyncio.Event()
        self.closed = False

    def offer(self, payload: bytes) -> None:
        self._latest = payload
        self._event.set()

    async def run(self):
        try:
            while not self.closed:
                await self._event.wait()
                self._event.clear()
                payload = self._latest
                if payload is not None:
                    await self.send(payload)
        except (ConnectionError, asyncio.CancelledError,
                websockets.ConnectionClosed):
            pass
        finally:
            self.closed = True


class TelemetryServer:
    """Run the pipeline over a detection source and broadcast FrameMessages.

    Publishes identical payload bytes on a raw TCP endpoint
    (newline-delimited) and a WebSocket endpoint (one payload per message).
    Control messages are accepted from any client on either endpoint and
    applied between frames in arrival order; malformed ones get an error
    reply on the sending connection only.
    """

    def __init__(self, layout: SceneLayout, source,
                 pipeline_config: PipelineConfig | None = None,
                 port: int = 9750, ws_port: int = 9751,
                 workers: int = 1):
        # the pipeline is GIL-bound numpy; more than one worker inflates
        # per-frame wall latency without adding throughput
        self.layout = layout
        self.source = source
        self.pipeline = FramePipeline(layout, pipeline_config)
        self.port = port
        self.ws_port = ws_port
        self.subscribers: set[_Subscriber] = set()
        self.paused = False
        self._controls: asyncio.Queue = asyncio.Queue()
        self._executor = ThreadPoolExecutor(max_workers=max(1, workers))
        self._stopping = asyncio.Event()
        self.frames_published = 0
        # set once both endpoints are listening; bound_* carry the actual
        # ports (useful with port=0)
        self.started = asyncio.Event()
        self.bound_port: int | None = None
        self.bound_ws_port: int | None = None

    # -- control ------------------------------------------------------------

    async def _apply_control(self, msg: ControlMessage) -> str | None:
        if msg.command == "select_target":
            try:
                self.pipeline.select_target(msg.name)
            except KeyError as exc:
                return str(exc)
        elif msg.command == "coil_delta":
            if not hasattr(self.source, "apply_delta"):
                return "coil steering requires the live simulator source"
            self.source.apply_delta(msg.dt, msg.drot_deg)
        elif msg.command == "pause":
            self.paused = True
        elif msg.command == "resume":
            self.paused = False
        elif msg.command == "set_options":
            if "use_fy_correction" in msg.options:
                self.pipeline.config.use_fy_correction = \
                    msg.options["use_fy_correction"]
            if "stale_window_frames" in msg.options:
                self.pipeline.config.stale_window_frames = \
                    msg.options["stale_window_frames"]
        return None

    async def _handle_control_line(self, line: bytes,
                                   reply: Callable[[bytes], Awaitable[None]]):
        try:
            msg = decode_control_message(line)
        except (ValueError, json.JSONDecodeError) as exc:
            await reply(encode_canonical(
                {"type": "error", "reason": str(exc)}).encode("ascii"))
            return
        await self._controls.put((msg, reply))

    async def _apply_and_reply(self, msg: ControlMessage, reply):
        error = await self._apply_control(msg)
        doc = {"type": "ack", "command": msg.command} if error is None \
            else {"type": "error", "reason": error}
        try:
            await reply(encode_canonical(doc).encode("ascii"))
        except (ConnectionError, websockets.ConnectionClosed):
            pass

    async def _drain_controls(self):
        while not self._controls.empty():
            msg, reply = self._controls.get_nowait()
            await self._apply_and_reply(msg, reply)
        # while paused, stay responsive to controls (resume arrives here)
        while self.paused and not self._stopping.is_set():
            try:
                msg, reply = await asyncio.wait_for(self._controls.get(), 0.1)
            except asyncio.TimeoutError:
                continue
            await self._apply_and_reply(msg, reply)

    # -- endpoints ------------------------------------------------------------

    async def _tcp_client(self, reader: asyncio.StreamReader,
                          writer: asyncio.StreamWriter):
        async def send(payload: bytes):
            writer.write(payload + b"\n")
            await writer.drain()

        sub = _Subscriber(send)
        self.subscribers.add(sub)
        task = asyncio.ensure_future(sub.run())
        try:
            async for line in reader:
                line = line.strip()
                if line:
                    await self._handle_control_line(line, send)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            sub.closed = True
            task.cancel()
            self.subscribers.discard(sub)
            writer.close()

    async def _ws_client(self, conn):
        async def send(payload: bytes):
            await conn.send(payload.decode("ascii"))

        sub = _Subscriber(send)
        self.subscribers.add(sub)
        task = asyncio.ensure_future(sub.run())
        try:
            async for message in conn:
                if isinstance(message, str):
                    message = message.encode("ascii")
                await self._handle_control_line(message, send)
        except websockets.ConnectionClosed:
            pass
        finally:
            sub.closed = True
            task.cancel()
            self.subscribers.discard(sub)

    def _broadcast(self, payload: bytes):
        for sub in list(self.subscribers):
            if sub.closed:
                self.subscribers.discard(sub)
            else:
                sub.offer(payload)

    # -- main loop --------------------------------------------------------------

    async def _publish(self, result: FrameResult):
        payload = encode_frame_message(frame_message_from_result(result))
        self._broadcast(payload)
        self.frames_published += 1

    async def run(self):
        """Serve until stop() is called or the source is exhausted."""
        loop = asyncio.get_running_loop()
        tcp_server = await asyncio.start_server(self._tcp_client, "0.0.0.0",
                                                self.port)
        ws_server = await websockets.serve(self._ws_client, "0.0.0.0",
                                           self.ws_port)
        self.bound_port = tcp_server.sockets[0].getsockname()[1]
        self.bound_ws_port = ws_server.sockets[0].getsockname()[1]
        self.started.set()
        log.info("telemetry on tcp :%d and ws :%d", self.bound_port,
                 self.bound_ws_port)
        try:
            async for frame_id, ts, dets in self.source.frames():
                if self._stopping.is_set():
                    break
                await self._drain_controls()
                # one frame in flight: publish before pulling the next, so
                # results never sit on an idle source and order is trivial
                result = await loop.run_in_executor(self._executor,
                                                    self.pipeline.process,
                                                    frame_id, dets, ts)
                await self._publish(result)
        finally:
            tcp_server.close()
            ws_server.close()
            await tcp_server.wait_closed()
            await ws_server.wait_closed()
            self._executor.shutdown(wait=False)

    def stop(self):
        self._stopping.set()
