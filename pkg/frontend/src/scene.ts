/**
 * Scene construction: turns the latest FrameMessage into a flat list of
 * draw commands (polylines, points, labels) through a small scene-graph
 * and an orbiting perspective camera. Pure math, no DOM: the canvas
 * renderer just replays the commands, which keeps this path unit-testable
 * and fast enough to rebuild every animation frame.
 */

import { FrameMessage, PoseWire } from "./protocol";
import { ViewState, hudBand } from "./state";

export type Vec3 = [number, number, number];

export interface Polyline {
  kind: "polyline";
  points: [number, number][];
  color: string;
  width: number;
}

export interface Marker {
  kind: "marker";
  at: [number, number];
  radius: number;
  color: string;
  fill: boolean;
}

export interface Label {
  kind: "label";
  at: [number, number];
  text: string;
  color: string;
}

export type DrawCommand = Polyline | Marker | Label;

export interface Hud {
  lateral_mm: number | null;
  gap_mm: number | null;
  tilt_deg: number | null;
  band: "green" | "amber" | "red" | "none";
  cameras: Record<string, string>;
  connection: string;
  frame_id: number | null;
  latency_ms: number | null;
}

export interface SceneFrame {
  commands: DrawCommand[];
  hud: Hud;
}

// --- quaternion/vector helpers (w, x, y, z convention) ---------------------

export function rotate(q: [number, number, number, number], v: Vec3): Vec3 {
  const [w, x, y, z] = q;
  // v' = v + 2 * cross(q.xyz, cross(q.xyz, v) + w * v)
  const cx1 = y * v[2] - z * v[1] + w * v[0];
  const cy1 = z * v[0] - x * v[2] + w * v[1];
  const cz1 = x * v[1] - y * v[0] + w * v[2];
  return [
    v[0] + 2 * (y * cz1 - z * cy1),
    v[1] + 2 * (z * cx1 - x * cz1),
    v[2] + 2 * (x * cy1 - y * cx1),
  ];
}

export function applyPose(pose: PoseWire, v: Vec3): Vec3 {
  const r = rotate(pose.q, v);
  return [r[0] + pose.t[0], r[1] + pose.t[1], r[2] + pose.t[2]];
}

export function invertPose(pose: PoseWire): PoseWire {
  const conj: [number, number, number, number] = [pose.q[0], -pose.q[1], -pose.q[2], -pose.q[3]];
  const t = rotate(conj, pose.t);
  return { q: conj, t: [-t[0], -t[1], -t[2]] };
}

export function composePose(a: PoseWire, b: PoseWire): PoseWire {
  const [w1, x1, y1, z1] = a.q;
  const [w2, x2, y2, z2] = b.q;
  const q: [number, number, number, number] = [
    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
  ];
  const t = rotate(a.q, b.t);
  return { q, t: [t[0] + a.t[0], t[1] + a.t[1], t[2] + a.t[2]] };
}

// --- orbit camera ------------------------------------------------------------

export interface OrbitCamera {
  azimuthDeg: number;
  elevationDeg: number;
  distanceMm: number;
  viewportW: number;
  viewportH: number;
  focalPx: number;
}

/** World (head-frame) point -> viewport pixel, or null when behind. */
export function projectPoint(cam: OrbitCamera, p: Vec3): [number, number] | null {
  const az = (cam.azimuthDeg * Math.PI) / 180;
  const el = (cam.elevationDeg * Math.PI) / 180;
  const eye: Vec3 = [
    cam.distanceMm * Math.cos(el) * Math.sin(az),
    cam.distanceMm * Math.sin(el),
    cam.distanceMm * Math.cos(el) * Math.cos(az),
  ];
  // camera basis: z toward origin, y roughly up
  const zlen = Math.hypot(...eye);
  const z: Vec3 = [-eye[0] / zlen, -eye[1] / zlen, -eye[2] / zlen];
  const upWorld: Vec3 = [0, 1, 0];
  let x: Vec3 = [
    z[1] * upWorld[2] - z[2] * upWorld[1],
    z[2] * upWorld[0] - z[0] * upWorld[2],
    z[0] * upWorld[1] - z[1] * upWorld[0],
  ];
  const xlen = Math.hypot(...x) || 1;
  x = [x[0] / xlen, x[1] / xlen, x[2] / xlen];
  const y: Vec3 = [
    z[1] * x[2] - z[2] * x[1],
    z[2] * x[0] - z[0] * x[2],
    z[0] * x[1] - z[1] * x[0],
  ];
  const d: Vec3 = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
  const cx = d[0] * x[0] + d[1] * x[1] + d[2] * x[2];
  const cy = d[0] * y[0] + d[1] * y[1] + d[2] * y[2];
  const cz = d[0] * z[0] + d[1] * z[1] + d[2] * z[2];
  if (cz <= 1.0) return null;
  return [
    cam.viewportW / 2 + (cam.focalPx * cx) / cz,
    cam.viewportH / 2 - (cam.focalPx * cy) / cz,
  ];
}

function projectPolyline(cam: OrbitCamera, pts: Vec3[], color: string, width: number): Polyline | null {
  const projected: [number, number][] = [];
  for (const p of pts) {
    const px = projectPoint(cam, p);
    if (px === null) return null;
    projected.push(px);
  }
  return { kind: "polyline", points: projected, color, width };
}

// --- scene assembly -----------------------------------------------------------

export const HEAD_RADIUS_MM = 85.0;

function sphereWireframe(cam: OrbitCamera, radius: number): DrawCommand[] {
  const commands: DrawCommand[] = [];
  const segments = 36;
  for (const elevationDeg of [-30, 0, 30, 60]) {
    const el = (elevationDeg * Math.PI) / 180;
    const ring: Vec3[] = [];
    for (let i = 0; i <= segments; i++) {
      const a = (2 * Math.PI * i) / segments;
      ring.push([
        radius * Math.cos(el) * Math.sin(a),
        radius * Math.sin(el),
        radius * Math.cos(el) * Math.cos(a),
      ]);
    }
    const line = projectPolyline(cam, ring, "#557", 1);
    if (line) commands.push(line);
  }
  for (const azimuthDeg of [0, 45, 90, 135]) {
    const az = (azimuthDeg * Math.PI) / 180;
    const ring: Vec3[] = [];
    for (let i = 0; i <= segments; i++) {
      const a = (2 * Math.PI * i) / segments;
      ring.push([
        radius * Math.cos(a) * Math.sin(az),
        radius * Math.sin(a),
        radius * Math.cos(a) * Math.cos(az),
      ]);
    }
    const line = projectPolyline(cam, ring, "#557", 1);
    if (line) commands.push(line);
  }
  return commands;
}

function coilGlyph(cam: OrbitCamera, coilInHead: PoseWire): DrawCommand[] {
  const commands: DrawCommand[] = [];
  const axes: [Vec3, string][] = [
    [[25, 0, 0], "#e33"],
    [[0, 25, 0], "#3c3"],
    [[0, 0, 25], "#36f"],
  ];
  const origin = applyPose(coilInHead, [0, 0, 0]);
  for (const [axis, color] of axes) {
    const tip = applyPose(coilInHead, axis);
    const line = projectPolyline(cam, [origin, tip], color, 2);
    if (line) commands.push(line);
  }
  // coil disc outline in its x-y plane
  const disc: Vec3[] = [];
  for (let i = 0; i <= 24; i++) {
    const a = (2 * Math.PI * i) / 24;
    disc.push(applyPose(coilInHead, [30 * Math.cos(a), 30 * Math.sin(a), 0]));
  }
  const discLine = projectPolyline(cam, disc, "#ccc", 2);
  if (discLine) commands.push(discLine);
  // stimulation ray along -z
  const ray = projectPolyline(
    cam,
    [origin, applyPose(coilInHead, [0, 0, -60])],
    "#fa0",
    1,
  );
  if (ray) commands.push(ray);
  return commands;
}

/** Coil pose expressed in the head frame, from world-frame wire poses. */
export function coilInHeadFrame(msg: FrameMessage): PoseWire | null {
  if (msg.head_pose === null || msg.coil_pose === null) return null;
  return composePose(invertPose(msg.head_pose), msg.coil_pose);
}

export function buildScene(state: ViewState, viewportW = 960, viewportH = 640): SceneFrame {
  const cam: OrbitCamera = {
    azimuthDeg: state.orbit.azimuthDeg,
    elevationDeg: state.orbit.elevationDeg,
    distanceMm: state.orbit.distanceMm,
    viewportW,
    viewportH,
    focalPx: 1.2 * Math.min(viewportW, viewportH),
  };
  const commands: DrawCommand[] = sphereWireframe(cam, HEAD_RADIUS_MM);
  const msg = state.latest;
  const hud: Hud = {
    lateral_mm: null,
    gap_mm: null,
    tilt_deg: null,
    band: "none",
    cameras: msg?.cameras ?? {},
    connection: state.connection,
    frame_id: msg?.frame_id ?? null,
    latency_ms: msg?.latency_ms ?? null,
  };
  if (msg !== null) {
    const coil = coilInHeadFrame(msg);
    if (coil !== null) {
      commands.push(...coilGlyph(cam, coil));
    }
    if (msg.target !== null) {
      const px = projectPoint(cam, msg.target);
      if (px) commands.push({ kind: "marker", at: px, radius: 6, color: "#fa0", fill: true });
    }
    if (msg.alignment !== null) {
      // HUD numbers come straight from the message, never recomputed
      hud.lateral_mm = msg.alignment.lateral_mm;
      hud.gap_mm = msg.alignment.gap_mm;
      hud.tilt_deg = msg.alignment.tilt_deg;
      hud.band = hudBand(msg.alignment.lateral_mm, msg.alignment.tilt_deg);
    }
  }
  // planned target marker (selected name resolves server-side; the target
  // field above is the live stimulation point)
  const planned = projectPoint(cam, [0, 0, HEAD_RADIUS_MM]);
  if (planned) {
    commands.push({ kind: "marker", at: planned, radius: 4, color: "#6cf", fill: false });
  }
  commands.push({
    kind: "label",
    at: [12, 20],
    text:
      hud.lateral_mm === null
        ? "no alignment"
        : `lateral ${hud.lateral_mm.toFixed(1)} mm  gap ${hud.gap_mm!.toFixed(1)} mm  tilt ${hud.tilt_deg!.toFixed(1)}°`,
    color: hud.band === "none" ? "#888" : hud.band,
  });
  return { commands, hud };
}
