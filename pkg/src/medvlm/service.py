"""HTTP service wrapping the full pipeline: image in -> preprocess -> encode
-> project -> prompt -> generate -> parse spans -> denormalize -> respond.

JSON API: ``POST /api/generate``, ``GET /api/health``, ``GET /api/tasks``.
This API is the sole contract with the browser console.
"""

from __future__ import annotations

import base64
import binascii
import threading
import time
import uuid
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .boxes import DegenerateBoxError, denormalize_box
from .lm import GenerationConfig
from .prompts import TaskIdentifier, UnknownTaskError
from .vision import ImageDecodeError


class GenerateRequest(BaseModel):
    image: str = Field(description="base64-encoded image bytes")
    task: str
    instruction: str
    max_new_tokens: int = 64
    temperature: Optional[float] = None
    seed: Optional[int] = None


class BadRequest(ValueError):
    pass


def run_generate_request(bundle, req: GenerateRequest) -> dict:
    """Shared by the HTTP handler and the ``infer`` CLI.

    Spans are denormalized against the ORIGINAL image size, never the resized
    model input; each response span carries both normalized and pixel boxes.
    """
    try:
        task = TaskIdentifier.from_name(req.task)
    except UnknownTaskError as exc:
        raise BadRequest(str(exc)) from exc
    if not req.instruction:
        raise BadRequest("instruction must be non-empty (for detection it is the disease label)")
    if req.max_new_tokens < 1:
        raise BadRequest("max_new_tokens must be >= 1")
    try:
        image_bytes = base64.b64decode(req.image, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise BadRequest(f"image is not valid base64: {exc}") from exc

    if req.temperature is not None:
        gen = GenerationConfig(
            max_new_tokens=req.max_new_tokens, mode="sample", temperature=req.temperature, seed=req.seed
        )
    else:
        gen = GenerationConfig(max_new_tokens=req.max_new_tokens, mode="greedy", seed=req.seed)

    from .prompts import PromptSpec, render_prompt

    try:
        prompt_text = render_prompt(PromptSpec(task=task, instruction=req.instruction)).text
    except ValueError as exc:
        raise BadRequest(str(exc)) from exc
    limit = bundle.context_length()
    if bundle.prompt_length(prompt_text) + 1 > limit:
        raise BadRequest(f"instruction too long: prompt does not fit context of {limit}")

    start = time.monotonic()
    try:
        out = bundle.run_inference(image_bytes, task, req.instruction, gen)
    except ImageDecodeError as exc:
        raise BadRequest(str(exc)) from exc
    latency_ms = (time.monotonic() - start) * 1000.0

    spans = []
    malformed = out.malformed_count
    for span in out.spans:
        try:
            pixel = denormalize_box(span.box, out.original_size)
        except DegenerateBoxError:
            # Zero-area on this image; not drawable, so report it with the
            # malformed ones rather than inventing a box.
            malformed += 1
            continue
        spans.append(
            {
                "phrase": span.phrase,
                "normalized_box": {
                    "x_left": span.box.x_left,
                    "y_top": span.box.y_top,
                    "x_right": span.box.x_right,
                    "y_bottom": span.box.y_bottom,
                },
                "pixel_box": {
                    "x_left": pixel.x_left,
                    "y_top": pixel.y_top,
                    "x_right": pixel.x_right,
                    "y_bottom": pixel.y_bottom,
                },
            }
        )
    return {
        "text": out.text,
        "spans": spans,
        "malformed_span_count": malformed,
        "truncated": out.truncated,
        "latency_ms": latency_ms,
        "image_size": {"width": out.original_size.width, "height": out.original_size.height},
    }


def create_app(
    bundle=None,
    checkpoint_path: Optional[str] = None,
    request_cap: int = 8,
) -> FastAPI:
    """Build the service app.

    Either pass a ready bundle or a checkpoint path; with a path the model
    loads lazily on the first generate request (health reports "loading"
    until then, "failed" with a reason if loading breaks).
    """
    app = FastAPI(title="medvlm inference service")
    # The browser console may be served from any static host.
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    state = {
        "bundle": bundle,
        "status": "ready" if bundle is not None else "loading",
        "reason": None,
        "started": time.monotonic(),
    }
    gate = threading.Semaphore(request_cap)
    load_lock = threading.Lock()

    def ensure_bundle():
        if state["bundle"] is not None:
            return state["bundle"]
        with load_lock:
            if state["bundle"] is None and state["status"] != "failed":
                try:
                    from .training import load_checkpoint

                    state["bundle"] = load_checkpoint(checkpoint_path).bundle
                    state["status"] = "ready"
                except Exception as exc:  # noqa: BLE001 - surfaced via health
                    state["status"] = "failed"
                    state["reason"] = str(exc)
        if state["bundle"] is None:
            raise HTTPException(status_code=503, detail=f"model not available: {state['reason']}")
        return state["bundle"]

    @app.get("/api/health")
    def health() -> dict:
        b = state["bundle"]
        doc = {
            "status": state["status"],
            "uptime_s": time.monotonic() - state["started"],
            "vocab_size": b.vocab.size if b is not None else None,
            "checkpoint_id": getattr(b, "checkpoint_id", None) if b is not None else None,
        }
        if state["reason"]:
            doc["reason"] = state["reason"]
        return doc

    @app.get("/api/tasks")
    def tasks() -> dict:
        return {"tasks": [t.value for t in TaskIdentifier]}

    @app.post("/api/generate")
    def generate_endpoint(req: GenerateRequest):
        if not gate.acquire(blocking=False):
            return JSONResponse(status_code=429, content={"error": "too many concurrent requests"})
        try:
            b = ensure_bundle()
            try:
                return run_generate_request(b, req)
            except BadRequest as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from exc
            except HTTPException:
                raise
            except Exception as exc:  # noqa: BLE001 - internal failure -> 500 + id
                request_id = uuid.uuid4().hex[:12]
                raise HTTPException(
                    status_code=500, detail=f"internal generation failure (request {request_id})"
                ) from exc
        finally:
            gate.release()

    return app
