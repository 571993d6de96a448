"""HTTP service wrapping the cloud state.

The robot data plane is a single endpoint, POST /fil, that carries one
binary frame per request and one per response (content type
application/octet-stream), so a byte capture of the session is exactly the
framed protocol. The management plane (status, labels, manual fusion) is
JSON with pydantic schemas.
"""
from __future__ import annotations

import threading
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request, Response
from pydantic import BaseModel

from .cloud import CloudState

OCTET_STREAM = "application/octet-stream"


class RobotInfo(BaseModel):
    robot_id: str
    modality: str
    round: int


class StatusResponse(BaseModel):
    mode: str
    expected_robots: int
    fusion_every: int
    registered: list[RobotInfo]
    bank_size: int
    fusion_count: int
    labels_round: int
    has_labels: bool
    pending_uploads: int
    cached_guides: list[str]


class LabelItem(BaseModel):
    scene_id: int
    label: float
    round: int
    n_contributors: int


class LabelsResponse(BaseModel):
    round: int
    count: int
    labels: list[LabelItem]


class FuseResponse(BaseModel):
    fused: bool
    fusion_count: int
    labels_round: int


class _AsyncFusionTimer(threading.Thread):
    """Fuses on an interval whenever uploads arrived since the last round."""

    def __init__(self, state: CloudState, interval: float):
        super().__init__(daemon=True, name="fusion-timer")
        self.state = state
        self.interval = interval
        self._stop = threading.Event()

    def run(self):
        while not self._stop.wait(self.interval):
            self.state.maybe_fuse_async()

    def stop(self):
        self._stop.set()


def create_app(state: CloudState) -> FastAPI:
    timer: list[_AsyncFusionTimer] = []

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if state.cfg.mode == "asynchronous":
            t = _AsyncFusionTimer(state, state.cfg.async_interval)
            t.start()
            timer.append(t)
        yield
        for t in timer:
            t.stop()

    app = FastAPI(title="fedsteer cloud", lifespan=lifespan)
    app.state.cloud = state

    @app.post("/fil")
    async def fil(request: Request) -> Response:
        raw = await request.body()
        reply = state.handle_frame(raw)
        return Response(content=reply, media_type=OCTET_STREAM)

    @app.get("/status", response_model=StatusResponse)
    def status() -> StatusResponse:
        return StatusResponse(**state.status())

    @app.get("/labels", response_model=LabelsResponse)
    def labels() -> LabelsResponse:
        rows = state.label_rows()
        return LabelsResponse(round=state.labels_round, count=len(rows),
                              labels=[LabelItem(**r) for r in rows])

    @app.post("/fuse", response_model=FuseResponse)
    def fuse() -> FuseResponse:
        fused = state.fuse_now()
        return FuseResponse(fused=fused, fusion_count=state.fusion_count,
                            labels_round=state.labels_round)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    return app


def run_server(state: CloudState, host: str, port: int) -> None:
    """Blocking uvicorn serve; used by the CLI serve subcommand."""
    import uvicorn

    uvicorn.run(create_app(state), host=host, port=port, log_level="warning")
