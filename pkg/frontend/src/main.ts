import { makeClient } from "./api";
import { drawnBoxToken } from "./boxText";
import { drawOverlays, drawPendingBox } from "./draw";
import { computeOverlays, fitDisplaySize } from "./overlay";
import {
  SessionState,
  appendTurn,
  beginRequest,
  failRequest,
  newSession,
  taskOptions,
  withImage,
  withTask,
} from "./session";
import type { PixelBox, Size } from "./types";

// Same-origin by default; override with ?api=http://host:port when the
// console is served from a separate static server.
const apiBase = new URLSearchParams(window.location.search).get("api") ?? "";
const client = makeClient(apiBase);

let state: SessionState = newSession();
let imageEl: HTMLImageElement | null = null;
let dragStart: { x: number; y: number } | null = null;
let drawnDisplayBox: PixelBox | null = null;

const el = {
  file: document.getElementById("file") as HTMLInputElement,
  task: document.getElementById("task") as HTMLSelectElement,
  instruction: document.getElementById("instruction") as HTMLInputElement,
  submit: document.getElementById("submit") as HTMLButtonElement,
  canvas: document.getElementById("canvas") as HTMLCanvasElement,
  history: document.getElementById("history") as HTMLUListElement,
  status: document.getElementById("status") as HTMLSpanElement,
};

function setStatus(text: string) {
  el.status.textContent = text;
}

function redraw() {
  const ctx = el.canvas.getContext("2d")!;
  ctx.clearRect(0, 0, el.canvas.width, el.canvas.height);
  if (imageEl) {
    ctx.drawImage(imageEl, 0, 0, el.canvas.width, el.canvas.height);
  }
  const last = state.history[state.history.length - 1];
  if (last && state.originalSize) {
    const display: Size = { width: el.canvas.width, height: el.canvas.height };
    drawOverlays(ctx, computeOverlays(last.response, state.originalSize, display));
  }
  if (drawnDisplayBox) {
    drawPendingBox(ctx, drawnDisplayBox);
  }
  el.submit.disabled = state.pending;
}

function renderHistory() {
  el.history.innerHTML = "";
  for (const turn of state.history) {
    const li = document.createElement("li");
    const q = document.createElement("b");
    q.textContent = `[${turn.task}] ${turn.instruction}`;
    const a = document.createElement("div");
    a.textContent =
      turn.response.text +
      (turn.response.malformed_span_count > 0
        ? ` (${turn.response.malformed_span_count} malformed box(es) dropped)`
        : "");
    li.append(q, a);
    el.history.append(li);
  }
}

async function loadTasks() {
  try {
    const tasks = await client.tasks();
    el.task.innerHTML = "";
    for (const opt of taskOptions(tasks)) {
      const option = document.createElement("option");
      option.value = opt.value;
      option.textContent = opt.label;
      el.task.append(option);
    }
    state = withTask(state, el.task.value);
    setStatus("ready");
  } catch (err) {
    setStatus(`cannot reach server: ${err}`);
  }
}

el.file.addEventListener("change", () => {
  const file = el.file.files?.[0];
  if (!file) return;
  const reader = new FileReader();
  reader.onload = () => {
    const dataUrl = String(reader.result);
    const img = new Image();
    img.onload = () => {
      const original: Size = { width: img.naturalWidth, height: img.naturalHeight };
      const display = fitDisplaySize(original, 640);
      el.canvas.width = display.width;
      el.canvas.height = display.height;
      imageEl = img;
      drawnDisplayBox = null;
      state = withImage(state, dataUrl.split(",", 2)[1], original, display.width / original.width);
      renderHistory();
      redraw();
    };
    img.src = dataUrl;
  };
  reader.readAsDataURL(file);
});

el.task.addEventListener("change", () => {
  state = withTask(state, el.task.value);
});

// Drag a rectangle (used by the identify task).
el.canvas.addEventListener("mousedown", (ev) => {
  const rect = el.canvas.getBoundingClientRect();
  dragStart = { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
});
el.canvas.addEventListener("mousemove", (ev) => {
  if (!dragStart) return;
  const rect = el.canvas.getBoundingClientRect();
  const x = ev.clientX - rect.left;
  const y = ev.clientY - rect.top;
  drawnDisplayBox = {
    x_left: Math.min(dragStart.x, x),
    y_top: Math.min(dragStart.y, y),
    x_right: Math.max(dragStart.x, x),
    y_bottom: Math.max(dragStart.y, y),
  };
  redraw();
});
el.canvas.addEventListener("mouseup", () => {
  dragStart = null;
});

el.submit.addEventListener("click", async () => {
  let instruction = el.instruction.value.trim();
  if (state.selectedTask === "identify" && drawnDisplayBox && state.originalSize) {
    instruction = `${instruction || "what is this"} ${drawnBoxToken(
      drawnDisplayBox,
      state.displayScale,
      state.originalSize,
    )}`;
  }
  try {
    state = beginRequest(state);
  } catch (err) {
    setStatus(String(err));
    return;
  }
  redraw();
  setStatus("generating...");
  try {
    const response = await client.generate({
      image: state.imageBase64!,
      task: state.selectedTask!,
      instruction,
      max_new_tokens: 64,
    });
    state = appendTurn(state, { task: state.selectedTask!, instruction, response });
    drawnDisplayBox = null;
    setStatus(`done in ${response.latency_ms.toFixed(0)} ms`);
  } catch (err) {
    state = failRequest(state);
    setStatus(String(err));
  }
  renderHistory();
  redraw();
});

loadTasks();
