"""FastAPI mock of the text-guided image-editing service.

The real backend is an external diffusion editor; this app speaks the same
wire protocol (``POST /generate``) and produces deterministic candidates so
the generate/filter loop can be exercised offline.
"""
from __future__ import annotations

import base64
import binascii
import hashlib
import threading

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .errors import CorruptHeader
from .imgcore import ImageBuffer, derive_seed
from .mockedits import local_edit, scramble

MODES = ("identity", "local-edit", "scramble", "flaky", "mixed")


class GenerateRequest(BaseModel):
    request_id: str = Field(min_length=1)
    prompt: str
    image_b64: str
    guidance: dict = Field(default_factory=dict)


class GenerateResponse(BaseModel):
    request_id: str
    image_b64: str
    meta: dict = Field(default_factory=dict)


def encode_image(img):
    return base64.b64encode(img.to_png_bytes()).decode("ascii")


def decode_image(b64, origin="image_b64"):
    blob = base64.b64decode(b64.encode("ascii"), validate=True)
    return ImageBuffer.from_png_bytes(blob, origin)


def _request_seed(seed, request_id):
    return derive_seed(seed, "mock", request_id)


def _mixed_choice(seed, request_id):
    h = hashlib.sha256(f"{seed}:{request_id}".encode()).digest()
    return "local-edit" if h[0] % 2 == 0 else "scramble"


def apply_mode(mode, img, seed, request_id):
    """Candidate and metadata for one request; a pure function of its arguments."""
    if mode == "mixed":
        mode = _mixed_choice(seed, request_id)
    if mode == "flaky":
        mode = "local-edit"
    rseed = _request_seed(seed, request_id)
    if mode == "identity":
        return img, {"mode": "identity"}
    if mode == "local-edit":
        out, ell, amp = local_edit(img, rseed)
        return out, {"mode": "local-edit", "ellipse": ell.to_dict(), "amplitude": amp}
    if mode == "scramble":
        return scramble(img, rseed), {"mode": "scramble"}
    raise ValueError(f"unknown mock mode {mode!r}")


def create_app(mode="local-edit", seed=0, fail_first=2):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    app = FastAPI(title="defectforge mock generator")
    lock = threading.Lock()
    app.state.mode = mode
    app.state.seed = seed
    app.state.requests = 0

    @app.get("/health")
    def health():
        return {"status": "ok", "mode": mode}

    @app.post("/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        with lock:
            app.state.requests += 1
            n = app.state.requests
        if mode == "flaky" and n <= fail_first:
            raise HTTPException(status_code=503, detail=f"warming up ({n}/{fail_first})")
        try:
            img = decode_image(req.image_b64)
        except (binascii.Error, ValueError, CorruptHeader) as exc:
            raise HTTPException(status_code=422, detail=f"undecodable image: {exc}")
        out, meta = apply_mode(mode, img, seed, req.request_id)
        return GenerateResponse(request_id=req.request_id, image_b64=encode_image(out), meta=meta)

    return app
