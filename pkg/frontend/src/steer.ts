/**
 * Steering controller: maps operator input (or the scripted regression
 * driver) to bounded coil_delta control messages, rate-limited to 20
 * messages per second, with optimistic local echo.
 *
 * The automatic mode needs nothing but the HUD's lateral error: it probes
 * one head-frame axis at a time with a fixed step, keeps going while the
 * error shrinks, reverses or rotates to the next axis when it grows.
 */

import {
  ControlMessage,
  FrameMessage,
  PoseWire,
  clampDelta,
  encodeControlMessage,
} from "./protocol";
import { composePose } from "./scene";

export const RATE_LIMIT_HZ = 20;
export const DEFAULT_STEP_MM = 2.0;

export type SendFn = (payload: string) => void;

export class Steering {
  private lastSentMs = -Infinity;
  private pendingEcho: PoseWire | null = null;
  clampedWarning = false;

  constructor(
    private send: SendFn,
    private stepMm: number = DEFAULT_STEP_MM,
    private now: () => number = () => Date.now(),
  ) {}

  /** Rate-limited, clamped coil nudge. Returns true when actually sent. */
  nudge(dt: [number, number, number], drotDeg: [number, number, number] = [0, 0, 0]): boolean {
    const t = this.now();
    if (t - this.lastSentMs < 1000 / RATE_LIMIT_HZ) {
      return false;
    }
    const { dt: cdt, drot_deg: cdr, clamped } = clampDelta(dt, drotDeg);
    this.clampedWarning = clamped;
    const msg: ControlMessage = { command: "coil_delta", dt: cdt, drot_deg: cdr };
    this.send(encodeControlMessage(msg));
    this.lastSentMs = t;
    this.applyEcho(cdt);
    return true;
  }

  /** Arrow-key style input: one bounded step along a head-frame axis. */
  keyStep(axis: 0 | 1 | 2, sign: 1 | -1): boolean {
    const dt: [number, number, number] = [0, 0, 0];
    dt[axis] = sign * this.stepMm;
    return this.nudge(dt);
  }

  private applyEcho(dt: [number, number, number]): void {
    const delta: PoseWire = { q: [1, 0, 0, 0], t: dt };
    this.pendingEcho =
      this.pendingEcho === null ? delta : composePose(delta, this.pendingEcho);
  }

  /**
   * Optimistic coil pose: the last server pose with unacknowledged deltas
   * applied on top (in the head frame). Reconciled by dropping the echo
   * whenever a fresh FrameMessage arrives.
   */
  optimisticCoil(serverCoilInHead: PoseWire | null): PoseWire | null {
    if (serverCoilInHead === null) return null;
    if (this.pendingEcho === null) return serverCoilInHead;
    return {
      q: serverCoilInHead.q,
      t: [
        serverCoilInHead.t[0] + this.pendingEcho.t[0],
        serverCoilInHead.t[1] + this.pendingEcho.t[1],
        serverCoilInHead.t[2] + this.pendingEcho.t[2],
      ],
    };
  }

  reconcile(): void {
    this.pendingEcho = null;
  }
}

const AXES: [number, number, number][] = [
  [1, 0, 0],
  [0, 1, 0],
  [0, 0, 1],
];

/** Greedy axis-probing driver for the scripted steering regression. */
export class AutoAligner {
  private axis = 0;
  private sign = 1;
  private lastLateral: number | null = null;
  private stalled = 0;
  done = false;

  constructor(
    private steering: Steering,
    private thresholdMm: number = 3.0,
    private stepMm: number = DEFAULT_STEP_MM,
  ) {}

  onFrame(msg: FrameMessage): void {
    if (msg.alignment === null) return;
    const lateral = msg.alignment.lateral_mm;
    if (lateral < this.thresholdMm) {
      this.done = true;
      return;
    }
    this.done = false;
    if (this.lastLateral !== null) {
      if (lateral > this.lastLateral - 1e-3) {
        // no improvement: reverse once, then move to the next axis
        this.stalled += 1;
        if (this.stalled === 1) {
          this.sign = -this.sign;
        } else {
          this.stalled = 0;
          this.axis = (this.axis + 1) % AXES.length;
        }
      } else {
        this.stalled = 0;
      }
    }
    const dir = AXES[this.axis];
    const step = Math.min(this.stepMm, Math.max(0.5, lateral / 2));
    const sent = this.steering.nudge([
      dir[0] * step * this.sign,
      dir[1] * step * this.sign,
      dir[2] * step * this.sign,
    ]);
    if (sent) {
      this.lastLateral = lateral;
    }
  }
}
