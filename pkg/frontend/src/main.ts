/**
 * Browser entry point. Configuration via URL query parameters:
 *   ?host=127.0.0.1&port=9751&target=A2
 * connects to the telemetry WebSocket endpoint, renders the live scene,
 * and (with steering enabled, key S) steers the simulated coil with the
 * arrow keys / PageUp / PageDown.
 */

import { TelemetryClient } from "./client";
import { encodeControlMessage } from "./protocol";
import { buildScene } from "./scene";
import { ViewState } from "./state";
import { Steering } from "./steer";
import { drawHudChips, drawScene } from "./render";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

export function start(): void {
  const host = param("host", window.location.hostname || "127.0.0.1");
  const port = param("port", "9751");
  const target = param("target", "A2");

  const canvas = document.getElementById("scene") as HTMLCanvasElement;
  const hudRoot = document.getElementById("hud")!;
  const banner = document.getElementById("banner")!;
  const ctx = canvas.getContext("2d")!;

  const state = new ViewState();
  state.selectedTarget = target;
  const client = new TelemetryClient({
    url: `ws://${host}:${port}`,
    state,
  });
  const steering = new Steering((payload) => client.send(payload));
  client.connect();

  let selected = false;
  const render = () => {
    const fresh = state.consume();
    if (fresh !== null) {
      steering.reconcile();
      if (!selected) {
        client.send(
          encodeControlMessage({ command: "select_target", name: target }),
        );
        selected = true;
      }
    }
    banner.style.display = state.connection === "live" ? "none" : "block";
    banner.textContent = `connection ${state.connection} — data may be stale`;
    const frame = buildScene(state, canvas.width, canvas.height);
    drawScene(ctx, frame);
    drawHudChips(hudRoot, frame);
    requestAnimationFrame(render);
  };
  requestAnimationFrame(render);

  window.addEventListener("keydown", (ev) => {
    if (ev.key === "s") {
      state.steering = !state.steering;
      return;
    }
    if (!state.steering) return;
    const map: Record<string, [0 | 1 | 2, 1 | -1]> = {
      ArrowLeft: [0, -1],
      ArrowRight: [0, 1],
      ArrowUp: [1, 1],
      ArrowDown: [1, -1],
      PageUp: [2, 1],
      PageDown: [2, -1],
    };
    const step = map[ev.key];
    if (step) {
      steering.keyStep(step[0], step[1]);
      ev.preventDefault();
    }
  });

  window.addEventListener("wheel", (ev) => {
    state.orbit.distanceMm = Math.max(
      150,
      Math.min(1500, state.orbit.distanceMm + ev.deltaY),
    );
  });
  let dragging = false;
  let last: [number, number] | null = null;
  canvas.addEventListener("mousedown", (ev) => {
    dragging = true;
    last = [ev.clientX, ev.clientY];
  });
  window.addEventListener("mouseup", () => (dragging = false));
  window.addEventListener("mousemove", (ev) => {
    if (!dragging || last === null) return;
    state.orbit.azimuthDeg += (ev.clientX - last[0]) * 0.5;
    state.orbit.elevationDeg = Math.max(
      -80,
      Math.min(80, state.orbit.elevationDeg + (ev.clientY - last[1]) * 0.5),
    );
    last = [ev.clientX, ev.clientY];
  });
}

if (typeof document !== "undefined" && document.getElementById("scene")) {
  start();
}
