/**
 * Scripted steering regression: drives the real telemetry server (live
 * simulator source) over its WebSocket endpoint, injects a 20 mm lateral
 * offset, and lets the automatic aligner bring the HUD lateral error
 * under 3 mm using nothing but the alignment feedback.
 */

import { spawn, ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import {
  decodeFrameMessage,
  encodeControlMessage,
  FrameMessage,
} from "../src/protocol";
import { AutoAligner, Steering, RATE_LIMIT_HZ } from "../src/steer";

const WS_PORT = 19870 + Math.floor(Math.random() * 900);
const TCP_PORT = WS_PORT + 1000;

let server: ChildProcess | null = null;

function startServer(): Promise<void> {
  return new Promise((resolve, reject) => {
    server = spawn(
      "python3",
      [
        "-m", "navtrace.cli", "simulate", "--live",
        "--frames", "0",
        "--sigma-px", "0.104",
        "--rate", "30",
        "--target", "A2",
        "--port", String(TCP_PORT),
        "--ws-port", String(WS_PORT),
      ],
      { cwd: "..", stdio: ["ignore", "pipe", "pipe"] },
    );
    const timer = setTimeout(() => reject(new Error("server start timeout")), 20000);
    server.stdout!.on("data", (chunk: Buffer) => {
      if (chunk.toString().includes("live sim")) {
        clearTimeout(timer);
        resolve();
      }
    });
    server.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`server exited early (${code})`));
    });
  });
}

function connect(): Promise<WebSocket> {
  return new Promise((resolve, reject) => {
    const attempt = (left: number) => {
      const ws = new WebSocket(`ws://127.0.0.1:${WS_PORT}`);
      ws.on("open", () => resolve(ws));
      ws.on("error", () => {
        ws.close();
        if (left > 0) setTimeout(() => attempt(left - 1), 250);
        else reject(new Error("cannot connect"));
      });
    };
    attempt(20);
  });
}

beforeAll(async () => {
  await startServer();
}, 30000);

afterAll(() => {
  server?.kill("SIGKILL");
});

describe("steering unit behavior", () => {
  it("rate-limits to 20 messages per second", () => {
    let clock = 0;
    const sent: string[] = [];
    const steering = new Steering((p) => sent.push(p), 2.0, () => clock);
    for (let i = 0; i < 100; i++) {
      steering.keyStep(0, 1);
      clock += 10; // 100 Hz of key events
    }
    // 1 s of events at the 20 Hz limit
    expect(sent.length).toBeLessThanOrEqual(20);
    expect(sent.length).toBeGreaterThanOrEqual(19);
  });

  it("a key step emits one message with the configured step", () => {
    const sent: string[] = [];
    const steering = new Steering((p) => sent.push(p), 2.0, () => 0);
    steering.keyStep(1, -1);
    expect(sent).toEqual([
      '{"type":"control","command":"coil_delta","dt":[0,-2,0],"drot_deg":[0,0,0]}',
    ]);
  });

  it("clamps oversized nudges and raises the warning flag", () => {
    const sent: string[] = [];
    const steering = new Steering((p) => sent.push(p), 2.0, () => 0);
    steering.nudge([500, 0, 0]);
    expect(steering.clampedWarning).toBe(true);
    expect(sent[0]).toContain('"dt":[50,0,0]');
  });
});

describe("scripted steering regression", () => {
  it("converges a 20 mm offset to < 3 mm lateral", async () => {
    const ws = await connect();
    const send = (payload: string) => ws.send(payload);
    send(encodeControlMessage({ command: "select_target", name: "A2" }));
    // inject the offset: 20 mm along the head-frame x axis
    send(encodeControlMessage({ command: "coil_delta", dt: [20, 0, 0], drot_deg: [0, 0, 0] }));

    const steering = new Steering(send);
    const aligner = new AutoAligner(steering, 3.0);
    let offsetSeen = false;
    let finalLateral = Number.POSITIVE_INFINITY;

    await new Promise<void>((resolve, reject) => {
      const deadline = setTimeout(
        () => reject(new Error(`did not converge; lateral ${finalLateral}`)),
        30000,
      );
      ws.on("message", (data: Buffer) => {
        let msg: FrameMessage;
        try {
          msg = decodeFrameMessage(data.toString());
        } catch {
          return; // ack/error replies
        }
        if (msg.alignment === null) return;
        const lateral = msg.alignment.lateral_mm;
        if (!offsetSeen) {
          if (lateral > 15.0) offsetSeen = true;
          return;
        }
        finalLateral = lateral;
        aligner.onFrame(msg);
        if (aligner.done && lateral < 3.0) {
          clearTimeout(deadline);
          resolve();
        }
      });
    });

    expect(finalLateral).toBeLessThan(3.0);
    ws.close();
  }, 45000);

  it("server rejects an out-of-bounds delta with an error reply", async () => {
    const ws = await connect();
    const reply = new Promise<string>((resolve) => {
      ws.on("message", (data: Buffer) => {
        const text = data.toString();
        if (text.includes('"type":"error"')) resolve(text);
      });
    });
    ws.send('{"type":"control","command":"coil_delta","dt":[80,0,0],"drot_deg":[0,0,0]}');
    const text = await reply;
    expect(text).toContain("exceeds");
    ws.close();
  }, 20000);
});
