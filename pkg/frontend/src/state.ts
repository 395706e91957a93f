/**
 * Viewer state: a latest-wins mailbox for incoming frames plus the
 * operator's UI state. Rendering only ever sees fully decoded messages;
 * older frames are discarded, never queued.
 */

import { FrameMessage } from "./protocol";

export type ConnectionStatus = "connecting" | "live" | "stale" | "closed";

export interface ErrorSample {
  frame_id: number;
  lateral_mm: number;
  gap_mm: number;
  tilt_deg: number;
}

export const HISTORY_CAPACITY = 300;

export class ViewState {
  connection: ConnectionStatus = "connecting";
  latest: FrameMessage | null = null;
  selectedTarget = "A2";
  steering = false;
  orbit = { azimuthDeg: 30, elevationDeg: 20, distanceMm: 450 };
  private history: ErrorSample[] = [];
  private mailbox: FrameMessage | null = null;
  framesDropped = 0;

  /** Deposit a decoded message; an unconsumed older one is dropped. */
  deliver(msg: FrameMessage): void {
    if (this.mailbox !== null) {
      this.framesDropped += 1;
    }
    this.mailbox = msg;
  }

  /** Take the newest message, if any, into the render state. */
  consume(): FrameMessage | null {
    const msg = this.mailbox;
    this.mailbox = null;
    if (msg !== null) {
      if (this.latest !== null && msg.frame_id <= this.latest.frame_id) {
        return null; // stale or duplicate delivery
      }
      this.latest = msg;
      if (msg.alignment !== null) {
        this.history.push({
          frame_id: msg.frame_id,
          lateral_mm: msg.alignment.lateral_mm,
          gap_mm: msg.alignment.gap_mm,
          tilt_deg: msg.alignment.tilt_deg,
        });
        if (this.history.length > HISTORY_CAPACITY) {
          this.history.splice(0, this.history.length - HISTORY_CAPACITY);
        }
      }
    }
    return msg;
  }

  errorHistory(): readonly ErrorSample[] {
    return this.history;
  }
}

/** HUD color band: green within 3 mm and 5 deg, amber within 6 mm, red beyond. */
export function hudBand(lateralMm: number, tiltDeg: number): "green" | "amber" | "red" {
  if (lateralMm <= 3.0 && tiltDeg <= 5.0) return "green";
  if (lateralMm <= 6.0) return "amber";
  return "red";
}
