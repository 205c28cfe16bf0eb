export type Size = { width: number; height: number };

export type PixelBox = { x_left: number; y_top: number; x_right: number; y_bottom: number };

export type NormalizedBox = { x_left: number; y_top: number; x_right: number; y_bottom: number };

export type Span = {
  phrase: string | null;
  normalized_box: NormalizedBox;
  pixel_box: PixelBox;
};

export type GenerateResponse = {
  text: string;
  spans: Span[];
  malformed_span_count: number;
  truncated: boolean;
  latency_ms: number;
  image_size: Size;
};

export type HealthDoc = {
  status: "ready" | "loading" | "failed";
  vocab_size: number | null;
  checkpoint_id: string | null;
  uptime_s: number;
  reason?: string;
};
