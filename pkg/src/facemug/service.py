"""HTTP session service for incremental editing.

Endpoints live under /v1 and exchange base64 PNG. Each session owns an
on-disk directory (append-only step log plus the initial and per-step
images), so a restarted server picks sessions back up where they stopped.
One edit runs per session at a time; concurrent edits on the same session
get 409 while different sessions proceed in parallel.

The session's working image is always the PNG-decoded tensor, never the
raw generator output, so replaying the log from the initial image gives
byte-identical step images.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
import json
import logging
import os
import threading
import time
import uuid
from collections import OrderedDict

import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from .checkpoint import load_checkpoint
from .config import cache_dir
from .data import image_to_png, png_to_image, png_to_mask, png_to_semantic
from .editing import DirectionRegistry
from .editor import EditRequest, Editor, default_registry_path
from .errors import FacemugError, InvalidInputError
from .evaluation import file_digest

log = logging.getLogger("facemug.service")

MAX_PAYLOAD_BYTES = 16 * 2 ** 20
TENSOR_CACHE_SLOTS = 16


class ApiError(Exception):
    def __init__(self, status: int, detail: str):
        self.status = status
        self.detail = detail
        super().__init__(detail)


class AttrStep(BaseModel):
    name: str
    epsilon: float


class CreateSessionPayload(BaseModel):
    image: str = Field(description="base64 PNG")


class EditPayload(BaseModel):
    mask: str = Field(description="base64 1-bit PNG")
    sketch: str | None = None
    semantic: str | None = None
    color: str | None = None
    exemplar: str | None = None
    text: str | None = None
    attrs: list[AttrStep] = Field(default_factory=list)
    seed: int = 0


def _b64_png(field: str, value: str) -> bytes:
    try:
        blob = base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ApiError(400, f"{field}: invalid base64: {exc}")
    if not blob.startswith(b"\x89PNG"):
        raise ApiError(400, f"{field}: not a PNG")
    return blob


def _probe_size(field: str, blob: bytes) -> tuple:
    try:
        with Image.open(io.BytesIO(blob)) as probe:
            return probe.size
    except (UnidentifiedImageError, OSError) as exc:
        raise ApiError(400, f"{field}: undecodable PNG: {exc}")


def _decode(field: str, value: str, decoder, resolution: int,
            warnings: list = None) -> torch.Tensor:
    blob = _b64_png(field, value)
    size = _probe_size(field, blob)
    if warnings is not None and size != (resolution, resolution):
        warnings.append(f"{field} resized from {size[0]}x{size[1]} to "
                        f"{resolution}x{resolution}")
    try:
        return decoder(blob, resolution)
    except (UnidentifiedImageError, OSError) as exc:
        raise ApiError(400, f"{field}: undecodable PNG: {exc}")


class _TensorLRU:
    """Bounded cache of decoded working images; misses reload from disk."""

    def __init__(self, slots: int = TENSOR_CACHE_SLOTS):
        self.slots = slots
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        return None

    def put(self, key, value):
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.slots:
                self._data.popitem(last=False)


class Session:
    """Disk-backed edit session. `steps` holds the effective (post-undo)
    step metadata; the log file additionally records undo markers."""

    def __init__(self, sid: str, root: str):
        self.sid = sid
        self.dir = os.path.join(root, sid)
        self.lock = threading.Lock()
        self.steps: list[dict] = []

    # ---------------------------------------------------------- disk layout

    def _log_path(self):
        return os.path.join(self.dir, "log.jsonl")

    def step_image_path(self, index: int) -> str:
        return os.path.join(self.dir, f"step_{index:05d}.png") if index > 0 \
            else os.path.join(self.dir, "initial.png")

    def step_inputs_path(self, index: int) -> str:
        return os.path.join(self.dir, f"step_{index:05d}.inputs.json")

    def create(self, initial_png: bytes) -> None:
        os.makedirs(self.dir)
        with open(self.step_image_path(0), "wb") as fh:
            fh.write(initial_png)
        with open(self._log_path(), "w"):
            pass

    @classmethod
    def from_disk(cls, sid: str, root: str) -> "Session | None":
        s = cls(sid, root)
        if not os.path.isfile(s._log_path()):
            return None
        with open(s._log_path()) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                if entry.get("op") == "undo":
                    if s.steps:
                        s.steps.pop()
                else:
                    s.steps.append(entry)
        return s

    def append_log(self, entry: dict) -> None:
        with open(self._log_path(), "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True,
                                separators=(",", ":")) + "\n")

    # --------------------------------------------------------------- state

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def current_png(self) -> bytes:
        with open(self.step_image_path(self.step_count), "rb") as fh:
            return fh.read()

    def record_step(self, entry: dict, output_png: bytes,
                    inputs: dict) -> None:
        index = entry["step_index"]
        with open(self.step_image_path(index), "wb") as fh:
            fh.write(output_png)
        with open(self.step_inputs_path(index), "w") as fh:
            json.dump(inputs, fh, sort_keys=True)
        self.append_log(entry)
        self.steps.append(entry)

    def record_undo(self) -> None:
        self.append_log({"op": "undo", "timestamp": time.time()})
        self.steps.pop()


def _summary(payload: EditPayload) -> dict:
    return {
        "modalities": sorted(name for name in
                             ("sketch", "semantic", "color", "exemplar")
                             if getattr(payload, name) is not None),
        "text": payload.text,
        "attrs": [[a.name, a.epsilon] for a in payload.attrs],
    }


def _inputs_digest(inputs: dict) -> str:
    blob = json.dumps(inputs, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def replay_session(editor: Editor, state_dir: str, sid: str) -> list:
    """Re-run every effective step from the initial image; returns the
    replayed PNG bytes per step (used to verify the determinism contract)."""
    session = Session.from_disk(sid, state_dir)
    if session is None:
        raise InvalidInputError(f"unknown session {sid}")
    resolution = editor.config.resolution
    with open(session.step_image_path(0), "rb") as fh:
        current = png_to_image(fh.read(), resolution)
    replayed = []
    for entry in session.steps:
        with open(session.step_inputs_path(entry["step_index"])) as fh:
            inputs = json.load(fh)
        payload = EditPayload(**inputs)
        request = _build_request(current, payload, resolution)
        result = editor.edit(request)
        png = image_to_png(result.image)
        replayed.append(png)
        current = png_to_image(png, resolution)
    return replayed


def _build_request(current: torch.Tensor, payload: EditPayload,
                   resolution: int, warnings: list = None) -> EditRequest:
    return EditRequest(
        image=current,
        mask=_decode("mask", payload.mask, png_to_mask, resolution, warnings),
        sketch=(_decode("sketch", payload.sketch, _sketch_decoder, resolution,
                        warnings) if payload.sketch else None),
        semantic=(_decode("semantic", payload.semantic, png_to_semantic,
                          resolution, warnings)
                  if payload.semantic else None),
        color=(_decode("color", payload.color, png_to_image, resolution,
                       warnings) if payload.color else None),
        exemplar=(_decode("exemplar", payload.exemplar, png_to_image,
                          resolution, warnings)
                  if payload.exemplar else None),
        text=payload.text,
        attrs=[(a.name, a.epsilon) for a in payload.attrs],
        seed=payload.seed)


def _sketch_decoder(blob: bytes, resolution: int) -> torch.Tensor:
    img = png_to_image(blob, resolution)
    return ((img.mean(dim=0, keepdim=True) + 1.0) / 2.0).clamp(0, 1)


def build_app(ckpt_path: str, state_dir: str = None,
              max_payload: int = MAX_PAYLOAD_BYTES) -> FastAPI:
    checkpoint = load_checkpoint(ckpt_path)
    registry_file = default_registry_path(ckpt_path)
    registry = (DirectionRegistry.load(registry_file)
                if os.path.exists(registry_file) else DirectionRegistry())
    editor = Editor(checkpoint, registry=registry)
    resolution = checkpoint.config.resolution
    ckpt_hash = file_digest(ckpt_path)
    state_dir = state_dir or os.path.join(cache_dir(), "sessions")
    os.makedirs(state_dir, exist_ok=True)

    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()
    tensors = _TensorLRU()

    app = FastAPI(title="facemug edit service", version="1")
    # surfaced for operational introspection and the replay test helper
    app.state.editor = editor
    app.state.sessions = sessions
    app.state.state_dir = state_dir

    # ------------------------------------------------------ error mapping

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"detail": exc.detail})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"detail": "malformed payload",
                                     "errors": exc.errors()})

    @app.exception_handler(Exception)
    async def _unhandled(request: Request, exc: Exception):
        correlation = uuid.uuid4().hex
        log.exception("unhandled error %s on %s", correlation, request.url)
        return JSONResponse(status_code=500,
                            content={"detail": "internal error",
                                     "correlation_id": correlation})

    @app.middleware("http")
    async def _payload_cap(request: Request, call_next):
        declared = request.headers.get("content-length")
        if declared and declared.isdigit() and int(declared) > max_payload:
            return JSONResponse(status_code=413,
                                content={"detail": "payload too large"})
        body = await request.body()
        if len(body) > max_payload:
            return JSONResponse(status_code=413,
                                content={"detail": "payload too large"})
        return await call_next(request)

    # ----------------------------------------------------- session lookup

    def get_session(sid: str) -> Session:
        with sessions_lock:
            if sid in sessions:
                return sessions[sid]
            loaded = Session.from_disk(sid, state_dir)
            if loaded is None:
                raise ApiError(404, f"unknown session {sid}")
            sessions[sid] = loaded
            return loaded

    def current_tensor(session: Session) -> torch.Tensor:
        key = (session.sid, session.step_count)
        cached = tensors.get(key)
        if cached is None:
            cached = png_to_image(session.current_png(), resolution)
            tensors.put(key, cached)
        return cached

    # ----------------------------------------------------------- endpoints

    @app.post("/v1/sessions")
    def create_session(payload: CreateSessionPayload):
        blob = _b64_png("image", payload.image)
        try:
            with Image.open(io.BytesIO(blob)) as probe:
                size = probe.size
        except (UnidentifiedImageError, OSError) as exc:
            raise ApiError(400, f"image: undecodable PNG: {exc}")
        warning = None
        if size != (resolution, resolution):
            warning = (f"image resized from {size[0]}x{size[1]} to "
                       f"{resolution}x{resolution}")
            blob = image_to_png(png_to_image(blob, resolution))
        sid = uuid.uuid4().hex
        session = Session(sid, state_dir)
        session.create(blob)
        with sessions_lock:
            sessions[sid] = session
        body = {"session_id": sid}
        if warning:
            body["warning"] = warning
        return body

    @app.post("/v1/sessions/{sid}/edit")
    def edit_step(sid: str, payload: EditPayload):
        session = get_session(sid)
        if not session.lock.acquire(blocking=False):
            raise ApiError(409, f"an edit is already running on session {sid}")
        try:
            warnings: list = []
            request = _build_request(current_tensor(session), payload,
                                     resolution, warnings)
            try:
                result = editor.edit(request)
            except FacemugError as exc:
                raise ApiError(422, str(exc))
            png = image_to_png(result.image)
            inputs = payload.model_dump()
            index = session.step_count + 1
            entry = {
                "step_index": index,
                "seed": payload.seed,
                "summary": _summary(payload),
                "mask_hash": hashlib.sha256(
                    base64.b64decode(payload.mask)).hexdigest(),
                "inputs_hash": _inputs_digest(inputs),
                "output_hash": hashlib.sha256(png).hexdigest(),
                "timestamp": time.time(),
            }
            session.record_step(entry, png, inputs)
            tensors.put((sid, index), png_to_image(png, resolution))
            body = {
                "image": base64.b64encode(png).decode("ascii"),
                "step_index": index,
                "timings": result.timings,
                "bg_max_dev": result.bg_max_dev,
                "seed": payload.seed,
            }
            if warnings:
                body["warning"] = "; ".join(warnings)
            if result.text_trajectory is not None:
                body["text_trajectory"] = result.text_trajectory
                body["text_aborted"] = result.text_aborted
            return body
        finally:
            session.lock.release()

    @app.post("/v1/sessions/{sid}/undo")
    def undo_step(sid: str):
        session = get_session(sid)
        if not session.lock.acquire(blocking=False):
            raise ApiError(409, f"an edit is already running on session {sid}")
        try:
            if session.step_count == 0:
                raise ApiError(422, "nothing to undo")
            session.record_undo()
            png = session.current_png()
            return {"image": base64.b64encode(png).decode("ascii"),
                    "step_index": session.step_count}
        finally:
            session.lock.release()

    @app.get("/v1/sessions/{sid}/history")
    def history(sid: str):
        session = get_session(sid)
        return {"session_id": sid, "steps": session.steps}

    @app.get("/v1/directions")
    def list_directions():
        return {"directions": [
            {"name": name,
             "default_epsilon": registry.get(name).default_epsilon}
            for name in registry.names()]}

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok", "ckpt_hash": ckpt_hash,
                "resolution": resolution}

    return app
