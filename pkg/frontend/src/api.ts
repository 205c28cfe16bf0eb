// All coupling to the inference server goes through these three calls.

import type { GenerateResponse, HealthDoc } from "./types";

export type GenerateBody = {
  image: string; // base64
  task: string;
  instruction: string;
  max_new_tokens?: number;
  temperature?: number;
  seed?: number;
};

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function requireOk(res: Response): Promise<any> {
  const body = await res.json().catch(() => ({}));
  if (!res.ok) {
    throw new ApiError(res.status, body.detail ?? body.error ?? res.statusText);
  }
  return body;
}

export function makeClient(baseUrl = "") {
  return {
    async tasks(): Promise<string[]> {
      const doc = await requireOk(await fetch(`${baseUrl}/api/tasks`));
      return doc.tasks;
    },
    async health(): Promise<HealthDoc> {
      return requireOk(await fetch(`${baseUrl}/api/health`));
    },
    async generate(body: GenerateBody): Promise<GenerateResponse> {
      return requireOk(
        await fetch(`${baseUrl}/api/generate`, {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(body),
        }),
      );
    },
  };
}

export type Client = ReturnType<typeof makeClient>;
