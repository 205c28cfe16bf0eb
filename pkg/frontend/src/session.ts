// All session state lives in the browser; the server stays stateless.

import type { GenerateResponse, Size } from "./types";

export type Turn = {
  task: string;
  instruction: string;
  response: GenerateResponse;
};

export type SessionState = {
  imageBase64: string | null;
  originalSize: Size | null;
  displayScale: number;
  selectedTask: string | null;
  history: readonly Turn[];
  pending: boolean; // one in-flight request per session
};

export function newSession(): SessionState {
  return {
    imageBase64: null,
    originalSize: null,
    displayScale: 1,
    selectedTask: null,
    history: [],
    pending: false,
  };
}

export function withImage(
  state: SessionState,
  imageBase64: string,
  originalSize: Size,
  displayScale: number,
): SessionState {
  if (displayScale <= 0) {
    throw new Error("display scale must be positive");
  }
  // New image, fresh conversation.
  return { ...newSession(), selectedTask: state.selectedTask, imageBase64, originalSize, displayScale };
}

export function withTask(state: SessionState, task: string): SessionState {
  return { ...state, selectedTask: task };
}

export function beginRequest(state: SessionState): SessionState {
  if (state.pending) {
    throw new Error("a request is already in flight");
  }
  if (!state.imageBase64 || !state.selectedTask) {
    throw new Error("load an image and pick a task first");
  }
  return { ...state, pending: true };
}

export function appendTurn(state: SessionState, turn: Turn): SessionState {
  return { ...state, pending: false, history: [...state.history, turn] };
}

export function failRequest(state: SessionState): SessionState {
  // Errors surface inline; history is never rolled back.
  return { ...state, pending: false };
}

/** <option> rows for the task picker, straight from GET /api/tasks. */
export function taskOptions(tasks: string[]): { value: string; label: string }[] {
  return tasks.map((t) => ({ value: t, label: `[${t}]` }));
}
