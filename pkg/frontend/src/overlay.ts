import type { GenerateResponse, Size } from "./types";

export type OverlayRect = {
  left: number;
  top: number;
  width: number;
  height: number;
  label: string;
  spanIndex: number;
};

/**
 * Scale each span's server pixel box into display space.
 *
 * The transform is the exact linear map displaySize / originalSize; the app
 * sizes the canvas aspect-preserving, so one uniform ratio applies.
 */
export function computeOverlays(
  response: GenerateResponse,
  original: Size,
  display: Size,
): OverlayRect[] {
  const scale = display.width / original.width;
  return response.spans.map((span, i) => ({
    left: span.pixel_box.x_left * scale,
    top: span.pixel_box.y_top * scale,
    width: (span.pixel_box.x_right - span.pixel_box.x_left) * scale,
    height: (span.pixel_box.y_bottom - span.pixel_box.y_top) * scale,
    label: span.phrase ?? `box ${i + 1}`,
    spanIndex: i,
  }));
}

/** Aspect-preserving display size for an image shown at most maxSide wide/tall. */
export function fitDisplaySize(original: Size, maxSide: number): Size {
  const scale = Math.min(1, maxSide / Math.max(original.width, original.height));
  return { width: original.width * scale, height: original.height * scale };
}
