"""Read-only render service over a trained checkpoint.

Endpoints (all under /v1):
  GET /v1/meta    -> {frame_count, condition_dims, va_points}
  GET /v1/render?frame=&v=&a=&yaw=&pitch=&w=&h=  -> image/png
  WS  /v1/stream  <- JSON render requests, -> binary PNG frames

Requests render over an immutable checkpoint snapshot; the service never
mutates state, so concurrent identical requests produce byte-identical
PNGs. Valence/arousal outside [-1, 1] is clamped and flagged via the
X-Clamped response header. Until the checkpoint finishes loading every
endpoint answers 503.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Query, Response, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from scipy.ndimage import zoom

from . import pngio
from .checkpoint import Checkpoint, load_checkpoint
from .pipeline import render_composite
from .scene import Camera, FrameConditions, orbit_camera


@dataclass
class RenderRequest:
    """One render: a dataset frame's conditions with optional VA/camera
    overrides. Valence/arousal are clamped to the unit square."""

    frame: int = 0
    v: float | None = None
    a: float | None = None
    yaw: float = 0.0
    pitch: float = 0.0
    width: int | None = None
    height: int | None = None

    def clamped_va(self) -> tuple:
        clamped = []
        v, a = self.v, self.a
        if v is not None and not -1.0 <= v <= 1.0:
            v = float(np.clip(v, -1.0, 1.0))
            clamped.append("v")
        if a is not None and not -1.0 <= a <= 1.0:
            a = float(np.clip(a, -1.0, 1.0))
            clamped.append("a")
        return v, a, clamped


class RenderService:
    """Pure render functions over one immutable checkpoint snapshot."""

    def __init__(self, checkpoint: Checkpoint, threads: int = 2):
        self.checkpoint = checkpoint
        self.centroid = checkpoint.model.head_centroid()
        self.pool = ThreadPoolExecutor(max_workers=max(threads, 1))

    def meta(self) -> dict:
        return {
            "frame_count": self.checkpoint.frame_count,
            "condition_dims": self.checkpoint.meta["condition_dims"],
            "va_points": self.checkpoint.meta["va_points"],
        }

    def _camera_for(self, base: Camera, req: RenderRequest) -> Camera:
        w = base.width if req.width is None else int(req.width)
        h = base.height if req.height is None else int(req.height)
        sx, sy = w / base.width, h / base.height
        fx, fy, cx, cy = base.fx * sx, base.fy * sy, base.cx * sx, base.cy * sy
        if req.yaw == 0.0 and req.pitch == 0.0:
            return Camera(fx, fy, cx, cy, base.rotation, base.translation, w, h)
        eye = -base.rotation.T @ base.translation
        radius = float(np.linalg.norm(eye - self.centroid))
        return orbit_camera(self.centroid, radius, req.yaw, req.pitch, fx, fy, cx, cy, w, h)

    def _background_for(self, camera: Camera) -> np.ndarray:
        bg = self.checkpoint.background
        if bg.shape[0] == camera.height and bg.shape[1] == camera.width:
            return bg
        factors = (camera.height / bg.shape[0], camera.width / bg.shape[1], 1)
        return np.clip(zoom(bg, factors, order=1), 0.0, 1.0)

    def render_png(self, req: RenderRequest) -> tuple:
        """Returns (png_bytes, clamped_fields). Raises KeyError on a bad frame."""
        if not 0 <= req.frame < self.checkpoint.frame_count:
            raise KeyError(f"frame {req.frame} out of range")
        cond: FrameConditions = self.checkpoint.conditions[req.frame]
        v, a, clamped = req.clamped_va()
        emotion = np.array(
            [cond.emotion[0] if v is None else v, cond.emotion[1] if a is None else a]
        )
        camera = self._camera_for(cond.camera, req)
        bg = self._background_for(camera)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fr = render_composite(
                self.checkpoint.model, cond, bg, emotion=emotion, camera=camera
            )
        return pngio.encode_color_bytes(fr.image), clamped

    def render_async(self, req: RenderRequest):
        return self.pool.submit(self.render_png, req)


def create_app(checkpoint_path=None, *, checkpoint: Checkpoint | None = None, threads: int = 2) -> FastAPI:
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app_: FastAPI):
        ck = checkpoint if checkpoint is not None else load_checkpoint(checkpoint_path)
        app_.state.service = RenderService(ck, threads=threads)
        yield
        app_.state.service = None

    app = FastAPI(title="emosplat render service", lifespan=lifespan)
    app.state.service = None

    def _service() -> RenderService | None:
        return app.state.service

    @app.get("/v1/meta")
    def meta():
        svc = _service()
        if svc is None:
            return JSONResponse({"error": "loading"}, status_code=503)
        return svc.meta()

    @app.get("/v1/render")
    def render_endpoint(
        frame: int = Query(0),
        v: float | None = Query(None),
        a: float | None = Query(None),
        yaw: float = Query(0.0),
        pitch: float = Query(0.0),
        w: int | None = Query(None),
        h: int | None = Query(None),
    ):
        svc = _service()
        if svc is None:
            return JSONResponse({"error": "loading"}, status_code=503)
        if w is not None and w < 1 or h is not None and h < 1:
            return JSONResponse({"error": "invalid size"}, status_code=400)
        req = RenderRequest(frame=frame, v=v, a=a, yaw=yaw, pitch=pitch, width=w, height=h)
        try:
            png, clamped = svc.render_async(req).result()
        except KeyError as exc:
            return JSONResponse({"error": str(exc)}, status_code=404)
        headers = {"X-Clamped": ",".join(clamped)} if clamped else {}
        return Response(content=png, media_type="image/png", headers=headers)

    @app.websocket("/v1/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        try:
            while True:
                raw = await ws.receive_text()
                svc = _service()
                if svc is None:
                    await ws.send_text(json.dumps({"error": "loading", "status": 503}))
                    continue
                try:
                    obj = json.loads(raw)
                    req = RenderRequest(
                        frame=int(obj.get("frame", 0)),
                        v=obj.get("v"),
                        a=obj.get("a"),
                        yaw=float(obj.get("yaw", 0.0)),
                        pitch=float(obj.get("pitch", 0.0)),
                        width=obj.get("width"),
                        height=obj.get("height"),
                    )
                except (ValueError, TypeError) as exc:
                    await ws.send_text(json.dumps({"error": f"bad request: {exc}", "status": 400}))
                    continue
                try:
                    png, _ = svc.render_async(req).result()
                except KeyError as exc:
                    await ws.send_text(json.dumps({"error": str(exc), "status": 404}))
                    continue
                await ws.send_bytes(png)
        except WebSocketDisconnect:
            return

    return app
