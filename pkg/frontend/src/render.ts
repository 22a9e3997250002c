// Canvas painter for the draw list produced by the view model.

import type { DrawRect, ViewConfig } from "./viewmodel.js";

export function drawScene(
  ctx: CanvasRenderingContext2D,
  cfg: ViewConfig,
  rects: DrawRect[],
): void {
  ctx.clearRect(0, 0, cfg.width, cfg.height);
  ctx.fillStyle = "#f4f1ea";
  ctx.fillRect(0, 0, cfg.width, cfg.height);

  for (const rect of rects) {
    ctx.save();
    ctx.translate(rect.cx, rect.cy);
    ctx.rotate(-rect.yaw); // canvas y is flipped relative to world
    ctx.fillStyle = rect.color;
    ctx.globalAlpha = rect.isBase ? 0.9 : 0.85;
    ctx.fillRect(-rect.halfW, -rect.halfH, 2 * rect.halfW, 2 * rect.halfH);
    ctx.globalAlpha = 1.0;
    ctx.lineWidth = rect.selected ? 3 : 1;
    ctx.strokeStyle = rect.selected ? "#d62728" : "#333";
    ctx.strokeRect(-rect.halfW, -rect.halfH, 2 * rect.halfW, 2 * rect.halfH);
    ctx.restore();

    if (!rect.isBase) {
      ctx.fillStyle = "#222";
      ctx.font = "11px sans-serif";
      ctx.textAlign = "center";
      ctx.fillText(rect.id, rect.cx, rect.cy + 4);
      if (rect.depth > 0) {
        // stack depth badge
        ctx.fillStyle = "#fff";
        ctx.beginPath();
        ctx.arc(rect.cx + rect.halfW - 2, rect.cy - rect.halfH + 2, 8, 0, 2 * Math.PI);
        ctx.fill();
        ctx.strokeStyle = "#555";
        ctx.lineWidth = 1;
        ctx.stroke();
        ctx.fillStyle = "#000";
        ctx.fillText(String(rect.depth), rect.cx + rect.halfW - 2, rect.cy - rect.halfH + 6);
      }
      if (rect.containerBadge) {
        ctx.fillStyle = rect.containerBadge === "open" ? "#2a9d2a" : "#8a2b2b";
        ctx.font = "10px sans-serif";
        ctx.fillText(rect.containerBadge, rect.cx, rect.cy - rect.halfH - 4);
      }
    }
  }
}
