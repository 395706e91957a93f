/** Canvas renderer: replays scene draw commands; no scene math here. */

import { SceneFrame } from "./scene";

const BAND_COLORS: Record<string, string> = {
  green: "#2e7",
  amber: "#fb3",
  red: "#f44",
  none: "#888",
};

export function drawScene(ctx: CanvasRenderingContext2D, frame: SceneFrame): void {
  const { width, height } = ctx.canvas;
  ctx.fillStyle = "#10131a";
  ctx.fillRect(0, 0, width, height);
  for (const cmd of frame.commands) {
    if (cmd.kind === "polyline") {
      ctx.strokeStyle = cmd.color;
      ctx.lineWidth = cmd.width;
      ctx.beginPath();
      cmd.points.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
      ctx.stroke();
    } else if (cmd.kind === "marker") {
      ctx.beginPath();
      ctx.arc(cmd.at[0], cmd.at[1], cmd.radius, 0, 2 * Math.PI);
      if (cmd.fill) {
        ctx.fillStyle = cmd.color;
        ctx.fill();
      } else {
        ctx.strokeStyle = cmd.color;
        ctx.lineWidth = 2;
        ctx.stroke();
      }
    } else {
      ctx.fillStyle = BAND_COLORS[cmd.color] ?? cmd.color;
      ctx.font = "14px monospace";
      ctx.fillText(cmd.text, cmd.at[0], cmd.at[1]);
    }
  }
}

export function drawHudChips(root: HTMLElement, frame: SceneFrame): void {
  const hud = frame.hud;
  const chips: string[] = [];
  chips.push(`<span class="chip ${hud.connection}">${hud.connection}</span>`);
  for (const [cid, status] of Object.entries(hud.cameras)) {
    chips.push(`<span class="chip ${status}">${cid}: ${status}</span>`);
  }
  if (hud.frame_id !== null) {
    chips.push(`<span class="chip">frame ${hud.frame_id}</span>`);
  }
  if (hud.latency_ms !== null) {
    chips.push(`<span class="chip">${hud.latency_ms.toFixed(1)} ms</span>`);
  }
  if (hud.band !== "none") {
    chips.push(
      `<span class="chip band" style="background:${BAND_COLORS[hud.band]}">` +
        `lateral ${hud.lateral_mm!.toFixed(1)} mm · gap ${hud.gap_mm!.toFixed(1)} mm · ` +
        `tilt ${hud.tilt_deg!.toFixed(1)}°</span>`,
    );
  }
  root.innerHTML = chips.join(" ");
}
