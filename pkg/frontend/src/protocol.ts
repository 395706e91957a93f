/**
 * Wire protocol: canonical encode/decode of FrameMessage and ControlMessage.
 *
 * The encoding mirrors the server's canonical rules exactly so that
 * encode(decode(payload)) is byte-identical:
 * - object keys in fixed schema order (camera ids sorted);
 * - no whitespace;
 * - numbers as fixed-point with at most 9 decimals, trailing zeros
 *   stripped, -0 normalized to 0; magnitudes >= 1e9 are out of schema.
 *
 * Quaternions are (w, x, y, z); translations in mm; angles in degrees.
 */

export interface PoseWire {
  q: [number, number, number, number];
  t: [number, number, number];
}

export interface Alignment {
  lateral_mm: number;
  gap_mm: number;
  tilt_deg: number;
}

export type CameraStatus = "tracked" | "occluded" | "stale";

export interface FrameMessage {
  frame_id: number;
  timestamp_ms: number;
  head_pose: PoseWire | null;
  coil_pose: PoseWire | null;
  target: [number, number, number] | null;
  alignment: Alignment | null;
  sigma_mm: number | null;
  cameras: Record<string, CameraStatus>;
  latency_ms: number;
}

export type ControlMessage =
  | { command: "select_target"; name: string }
  | { command: "coil_delta"; dt: [number, number, number]; drot_deg: [number, number, number] }
  | { command: "pause" }
  | { command: "resume" }
  | { command: "set_options"; use_fy_correction?: boolean; stale_window_frames?: number };

export const MAX_DELTA_T_MM = 50.0;
export const MAX_DELTA_ROT_DEG = 30.0;
const QUAT_NORM_SLACK = 1e-3;

export function formatNumber(x: number): string {
  if (!Number.isFinite(x)) {
    throw new Error("non-finite number in wire message");
  }
  if (Math.abs(x) >= 1e9) {
    throw new Error(`number ${x} exceeds wire schema bounds`);
  }
  let s = x.toFixed(9);
  if (s.includes(".")) {
    s = s.replace(/0+$/, "").replace(/\.$/, "");
  }
  if (s === "-0" || s === "") {
    s = "0";
  }
  return s;
}

type Encodable =
  | null
  | boolean
  | number
  | string
  | Encodable[]
  | { [key: string]: Encodable };

export function encodeCanonical(value: Encodable): string {
  if (value === null) return "null";
  if (typeof value === "boolean") return value ? "true" : "false";
  if (typeof value === "number") return formatNumber(value);
  if (typeof value === "string") return JSON.stringify(value);
  if (Array.isArray(value)) {
    return "[" + value.map(encodeCanonical).join(",") + "]";
  }
  // plain object: insertion order (schema keys are never integer-like)
  const parts: string[] = [];
  for (const [k, v] of Object.entries(value)) {
    parts.push(`${JSON.stringify(k)}:${encodeCanonical(v)}`);
  }
  return "{" + parts.join(",") + "}";
}

function encodePose(pose: PoseWire | null): Encodable {
  if (pose === null) return null;
  return { q: [...pose.q], t: [...pose.t] };
}

export function encodeFrameMessage(msg: FrameMessage): string {
  const cameras: { [key: string]: Encodable } = {};
  for (const key of Object.keys(msg.cameras).sort()) {
    cameras[key] = msg.cameras[key];
  }
  return encodeCanonical({
    type: "frame",
    frame_id: msg.frame_id,
    timestamp_ms: msg.timestamp_ms,
    head_pose: encodePose(msg.head_pose),
    coil_pose: encodePose(msg.coil_pose),
    target: msg.target === null ? null : [...msg.target],
    alignment:
      msg.alignment === null
        ? null
        : {
            lateral_mm: msg.alignment.lateral_mm,
            gap_mm: msg.alignment.gap_mm,
            tilt_deg: msg.alignment.tilt_deg,
          },
    sigma_mm: msg.sigma_mm,
    cameras,
    latency_ms: msg.latency_ms,
  });
}

function decodePose(raw: unknown): PoseWire | null {
  if (raw === null || raw === undefined) return null;
  const obj = raw as { q?: unknown; t?: unknown };
  const q = obj.q as number[];
  const t = obj.t as number[];
  if (!Array.isArray(q) || q.length !== 4 || !Array.isArray(t) || t.length !== 3) {
    throw new Error("pose must carry q[4] and t[3]");
  }
  const norm = Math.hypot(q[0], q[1], q[2], q[3]);
  if (!Number.isFinite(norm) || Math.abs(norm - 1.0) > QUAT_NORM_SLACK) {
    throw new Error(`pose quaternion is not near-unit (norm ${norm})`);
  }
  if (!t.every(Number.isFinite)) {
    throw new Error("pose translation malformed");
  }
  return { q: [q[0], q[1], q[2], q[3]], t: [t[0], t[1], t[2]] };
}

export function decodeFrameMessage(payload: string): FrameMessage {
  const data = JSON.parse(payload);
  if (data.type !== "frame") {
    throw new Error("not a frame message");
  }
  const target = data.target ?? null;
  if (target !== null && (!Array.isArray(target) || target.length !== 3)) {
    throw new Error("target must be [x, y, z] or null");
  }
  return {
    frame_id: data.frame_id,
    timestamp_ms: data.timestamp_ms,
    head_pose: decodePose(data.head_pose),
    coil_pose: decodePose(data.coil_pose),
    target: target === null ? null : [target[0], target[1], target[2]],
    alignment: data.alignment ?? null,
    sigma_mm: data.sigma_mm ?? null,
    cameras: data.cameras ?? {},
    latency_ms: data.latency_ms,
  };
}

/** Clamp a coil delta to the protocol bounds; reports whether it clamped. */
export function clampDelta(
  dt: [number, number, number],
  drotDeg: [number, number, number],
): { dt: [number, number, number]; drot_deg: [number, number, number]; clamped: boolean } {
  let clamped = false;
  const tNorm = Math.hypot(...dt);
  let outT: [number, number, number] = [...dt];
  if (tNorm > MAX_DELTA_T_MM) {
    const s = MAX_DELTA_T_MM / tNorm;
    outT = [dt[0] * s, dt[1] * s, dt[2] * s];
    clamped = true;
  }
  const rNorm = Math.hypot(...drotDeg);
  let outR: [number, number, number] = [...drotDeg];
  if (rNorm > MAX_DELTA_ROT_DEG) {
    const s = MAX_DELTA_ROT_DEG / rNorm;
    outR = [drotDeg[0] * s, drotDeg[1] * s, drotDeg[2] * s];
    clamped = true;
  }
  return { dt: outT, drot_deg: outR, clamped };
}

export function encodeControlMessage(msg: ControlMessage): string {
  switch (msg.command) {
    case "select_target":
      return encodeCanonical({ type: "control", command: msg.command, name: msg.name });
    case "coil_delta":
      return encodeCanonical({
        type: "control",
        command: msg.command,
        dt: [...msg.dt],
        drot_deg: [...msg.drot_deg],
      });
    case "pause":
    case "resume":
      return encodeCanonical({ type: "control", command: msg.command });
    case "set_options": {
      const doc: { [key: string]: Encodable } = { type: "control", command: msg.command };
      if (msg.use_fy_correction !== undefined) doc.use_fy_correction = msg.use_fy_correction;
      if (msg.stale_window_frames !== undefined) doc.stale_window_frames = msg.stale_window_frames;
      return encodeCanonical(doc);
    }
  }
}

export interface ServerReply {
  type: "ack" | "error";
  command?: string;
  reason?: string;
}

/** Parse a non-frame server line (ack/error replies). */
export function decodeReply(payload: string): ServerReply | null {
  const data = JSON.parse(payload);
  if (data.type === "ack" || data.type === "error") {
    return data as ServerReply;
  }
  return null;
}
