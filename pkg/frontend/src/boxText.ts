// Textual box grammar shared with the server: {<x_left><y_top><x_right><y_bottom>}
// on the integer [0,100] grid. Serialization must stay byte-identical to the
// training-target format, so: decimal integers, no padding, no whitespace.

import type { NormalizedBox, PixelBox, Size } from "./types";

export function serializeBox(box: NormalizedBox): string {
  return `{<${box.x_left}><${box.y_top}><${box.x_right}><${box.y_bottom}>}`;
}

function roundHalfUp(v: number): number {
  return Math.floor(v + 0.5);
}

/** Map a pixel-space rectangle onto the [0,100] grid (round half up, clamped). */
export function normalizeBox(box: PixelBox, size: Size): NormalizedBox {
  const scale = (coord: number, extent: number) =>
    Math.min(100, Math.max(0, roundHalfUp((coord / extent) * 100)));
  return {
    x_left: scale(box.x_left, size.width),
    y_top: scale(box.y_top, size.height),
    x_right: scale(box.x_right, size.width),
    y_bottom: scale(box.y_bottom, size.height),
  };
}

/** Serialized grid box for a rectangle the user drew in display space. */
export function drawnBoxToken(drawn: PixelBox, displayScale: number, original: Size): string {
  const pixel: PixelBox = {
    x_left: drawn.x_left / displayScale,
    y_top: drawn.y_top / displayScale,
    x_right: drawn.x_right / displayScale,
    y_bottom: drawn.y_bottom / displayScale,
  };
  return serializeBox(normalizeBox(pixel, original));
}
