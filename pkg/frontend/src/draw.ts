import type { OverlayRect } from "./overlay";

const BOX_COLORS = ["#22d3ee", "#f97316", "#a3e635", "#e879f9", "#facc15"];

export function drawOverlays(ctx: CanvasRenderingContext2D, overlays: OverlayRect[]) {
  ctx.lineWidth = 2;
  ctx.font = "13px sans-serif";
  for (const rect of overlays) {
    const color = BOX_COLORS[rect.spanIndex % BOX_COLORS.length];
    ctx.strokeStyle = color;
    ctx.strokeRect(rect.left, rect.top, rect.width, rect.height);
    const tw = ctx.measureText(rect.label).width + 8;
    ctx.fillStyle = "rgba(0,0,0,0.65)";
    ctx.fillRect(rect.left, Math.max(0, rect.top - 17), tw, 17);
    ctx.fillStyle = color;
    ctx.fillText(rect.label, rect.left + 4, Math.max(11, rect.top - 5));
  }
}

export function drawPendingBox(
  ctx: CanvasRenderingContext2D,
  box: { x_left: number; y_top: number; x_right: number; y_bottom: number },
) {
  ctx.setLineDash([5, 4]);
  ctx.strokeStyle = "#ffffff";
  ctx.lineWidth = 1.5;
  ctx.strokeRect(box.x_left, box.y_top, box.x_right - box.x_left, box.y_bottom - box.y_top);
  ctx.setLineDash([]);
}
