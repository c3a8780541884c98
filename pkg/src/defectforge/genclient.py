"""Prompt rendering, the HTTP client for the image-editing service and a
launcher for the local mock."""
from __future__ import annotations

import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field

import httpx
import pydantic
import uvicorn

from .errors import (CorruptHeader, DimensionMismatch, MalformedResponse, PortInUse,
                     ServiceUnavailable, UnknownDefectType)
from .imgcore import ImageBuffer
from .service import GenerateRequest, GenerateResponse, create_app, decode_image, encode_image

log = logging.getLogger(__name__)

ENV_SERVICE_URL = "DEFECTFORGE_SERVICE_URL"
DEFAULT_VOCABULARY = ("scratch", "dent", "stain", "crack", "hole", "contamination")
DEFAULT_TEMPLATE = "add a {defect_type} defect to the {category}"


@dataclass(frozen=True)
class Prompt:
    category: str
    defect_type: str
    template_id: str
    rendered: str


@dataclass
class TemplateRegistry:
    templates: dict = field(default_factory=lambda: {"default": DEFAULT_TEMPLATE})
    by_category: dict = field(default_factory=dict)
    vocabulary: tuple = DEFAULT_VOCABULARY
    strict: bool = True

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        reg = cls()
        if "templates" in d:
            reg.templates = {"default": DEFAULT_TEMPLATE, **d["templates"]}
        reg.by_category = dict(d.get("by_category", {}))
        reg.vocabulary = tuple(d.get("vocabulary", DEFAULT_VOCABULARY))
        reg.strict = bool(d.get("strict", True))
        return reg


def build_prompt(category, defect_type, registry=None):
    registry = registry or TemplateRegistry()
    if registry.strict and defect_type not in registry.vocabulary:
        raise UnknownDefectType(f"{defect_type!r} is not in the defect vocabulary")
    template_id = registry.by_category.get(category, "default")
    if template_id not in registry.templates:
        template_id = "default"
    rendered = registry.templates[template_id].format(category=category, defect_type=defect_type)
    return Prompt(category, defect_type, template_id, rendered)


@dataclass(frozen=True)
class GenerationRequest:
    request_id: str
    image: ImageBuffer
    prompt: str
    guidance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GenerationResponse:
    request_id: str
    image: ImageBuffer
    latency_ms: float
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_s: float = 0.05
    backoff_factor: float = 2.0
    timeout_s: float = 30.0
    max_image_bytes: int = 8 << 20


_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def resolve_endpoint(configured=None):
    return os.environ.get(ENV_SERVICE_URL) or configured


def request_generation(endpoint, req, policy=None, client=None):
    """POST one request, retrying transient failures with exponential backoff."""
    policy = policy or RetryPolicy()
    prompt = req.prompt.rendered if isinstance(req.prompt, Prompt) else req.prompt
    png = req.image.to_png_bytes()
    if len(png) > policy.max_image_bytes:
        raise ValueError(f"encoded image is {len(png)} bytes, limit {policy.max_image_bytes}")
    body = GenerateRequest(request_id=req.request_id, prompt=prompt,
                           image_b64=encode_image(req.image), guidance=req.guidance).model_dump()
    url = endpoint.rstrip("/") + "/generate"
    own_client = client is None
    client = client or httpx.Client(timeout=policy.timeout_s)
    attempts = 0
    last_error = ""
    try:
        while True:
            attempts += 1
            t0 = time.perf_counter()
            try:
                resp = client.post(url, json=body)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    latency = (time.perf_counter() - t0) * 1000.0
                    return _parse_response(resp, req, latency)
                last_error = f"HTTP {resp.status_code}"
                if resp.status_code not in _RETRYABLE_STATUS:
                    raise ServiceUnavailable(f"{url} rejected request: {last_error}",
                                             attempts=attempts)
            if attempts > policy.max_retries:
                raise ServiceUnavailable(
                    f"{url} unavailable after {attempts} attempts ({last_error})", attempts=attempts)
            delay = policy.backoff_s * policy.backoff_factor ** (attempts - 1)
            log.debug("attempt %d for %s failed (%s); retrying in %.3fs",
                      attempts, req.request_id, last_error, delay)
            time.sleep(delay)
    finally:
        if own_client:
            client.close()


def _parse_response(resp, req, latency_ms):
    try:
        payload = GenerateResponse.model_validate(resp.json())
    except (ValueError, pydantic.ValidationError) as exc:
        raise MalformedResponse(f"bad response body for {req.request_id}: {exc}") from exc
    if payload.request_id != req.request_id:
        raise MalformedResponse(
            f"response echoes request_id {payload.request_id!r}, expected {req.request_id!r}")
    try:
        img = decode_image(payload.image_b64)
    except (ValueError, CorruptHeader) as exc:
        raise MalformedResponse(f"undecodable candidate for {req.request_id}: {exc}") from exc
    if img.shape != req.image.shape:
        raise DimensionMismatch(
            f"candidate {img.width}x{img.height} differs from input {req.image.width}x{req.image.height}")
    return GenerationResponse(payload.request_id, img, latency_ms, dict(payload.meta))


class MockServer:
    """A mock service running on a background uvicorn thread."""

    def __init__(self, mode, seed, port, host="127.0.0.1", fail_first=2):
        self.app = create_app(mode, seed, fail_first)
        self.host = host
        self.port = port
        config = uvicorn.Config(self.app, host=host, port=port, log_level="warning",
                                lifespan="off")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    @property
    def url(self):
        return f"http://{self.host}:{self.port}"

    @property
    def requests_served(self):
        return self.app.state.requests

    def start(self, timeout=10.0):
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                raise PortInUse(f"mock service failed to start on {self.host}:{self.port}")
            time.sleep(0.01)
        return self

    def stop(self):
        self._server.should_exit = True
        self._thread.join(timeout=10.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def _free_port(host):
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def serve_mock(mode="local-edit", seed=0, port=0, host="127.0.0.1", fail_first=2):
    """Start the mock service and return a running :class:`MockServer`.

    ``port=0`` picks a free port. Raises :class:`PortInUse` if ``port`` is taken.
    """
    if port == 0:
        port = _free_port(host)
    else:
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            try:
                s.bind((host, port))
            except OSError as exc:
                raise PortInUse(f"{host}:{port} is already in use") from exc
    return MockServer(mode, seed, port, host, fail_first).start()
