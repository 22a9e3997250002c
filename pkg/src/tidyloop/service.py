"""HTTP session service: the operator/UI surface over the planning loop."""

from __future__ import annotations

import os
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .config import EngineConfig
from .errors import (
    EmptyText,
    LoopBudgetExhausted,
    NoProgress,
    SceneGraphError,
    TidyloopError,
)
from .scene import SceneGraph
from .session import SessionManager

ENV_UI_DIR = "TIDYLOOP_UI_DIR"


class PoseModel(BaseModel):
    position: list[float] = Field(min_length=3, max_length=3)
    yaw: float = 0.0


class NodeModel(BaseModel):
    id: str
    label: str
    half_extents: list[float] = Field(min_length=3, max_length=3)
    mass: float
    category: str = ""
    pose: Optional[PoseModel] = None
    states: dict[str, bool] = Field(default_factory=dict)
    is_container: bool = False
    is_base: bool = False


class EdgeModel(BaseModel):
    kind: str
    parent: str
    child: str
    source: str = "initial_observation"
    step_index: Optional[int] = None


class GroupModel(BaseModel):
    category: str
    members: list[str]
    intra_edges: list[EdgeModel] = Field(default_factory=list)


class SceneModel(BaseModel):
    nodes: list[NodeModel]
    edges: list[EdgeModel] = Field(default_factory=list)
    groups: list[GroupModel] = Field(default_factory=list)

    def to_graph(self) -> SceneGraph:
        return SceneGraph.from_document(self.model_dump(exclude_none=True))


class CreateSessionRequest(BaseModel):
    scene: SceneModel
    instruction: str
    seed: Optional[int] = None


class PreferenceRequest(BaseModel):
    text: str


class AdjustmentRequest(BaseModel):
    scene: SceneModel


def create_app(config: EngineConfig | None = None) -> FastAPI:
    config = config or EngineConfig()
    manager = SessionManager(config)
    app = FastAPI(title="tidyloop", version="0.1.0")
    app.state.manager = manager

    @app.exception_handler(RequestValidationError)
    async def malformed_body(_request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "MalformedBody", "detail": exc.errors()})

    def _get_session(session_id: str):
        try:
            return manager.get(session_id)
        except KeyError:
            return None

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionRequest):
        try:
            session = manager.create(body.scene.to_graph(), body.instruction, seed=body.seed)
        except (SceneGraphError, ValueError) as exc:
            return JSONResponse(status_code=400, content={"error": "BadScene", "detail": str(exc)})
        return {"id": session.id, "status": session.status.value}

    @app.get("/sessions/{session_id}")
    def session_info(session_id: str):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSession"})
        return {
            "id": session.id,
            "status": session.status.value,
            "loop_iteration": session.loop_iteration,
            "instruction": session.instruction,
            "pending_events": [e.to_dict() for e in session.pending_events],
            "failure_reason": session.failure_reason,
        }

    @app.get("/sessions/{session_id}/scene")
    def session_scene(session_id: str):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSession"})
        return session.current_scene().to_document()

    @app.post("/sessions/{session_id}/preference", status_code=202)
    def post_preference(session_id: str, body: PreferenceRequest):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSession"})
        try:
            return manager.add_preference(session_id, body.text)
        except EmptyText as exc:
            return JSONResponse(status_code=400, content={"error": "EmptyText", "detail": str(exc)})

    @app.post("/sessions/{session_id}/adjustment", status_code=202)
    def post_adjustment(session_id: str, body: AdjustmentRequest):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSession"})
        try:
            return manager.add_adjustment(session_id, body.scene.to_graph())
        except ValueError as exc:
            return JSONResponse(status_code=400, content={"error": "EmptyDiff", "detail": str(exc)})
        except TidyloopError as exc:
            return JSONResponse(status_code=400, content={"error": type(exc).__name__, "detail": str(exc)})

    @app.post("/sessions/{session_id}/step")
    def post_step(session_id: str):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSession"})
        try:
            return manager.step(session_id)
        except PermissionError as exc:
            return JSONResponse(status_code=409, content={"error": "SessionFinished", "detail": str(exc)})
        except (NoProgress, LoopBudgetExhausted) as exc:
            return JSONResponse(
                status_code=200,
                content={
                    "status": "failed",
                    "error": type(exc).__name__,
                    "detail": str(exc),
                },
            )

    @app.get("/sessions/{session_id}/transcript")
    def get_transcript(session_id: str):
        session = _get_session(session_id)
        if session is None:
            return JSONResponse(status_code=404, content={"error": "UnknownSession"})
        return {"entries": session.transcript.entries}

    ui_dir = os.environ.get(ENV_UI_DIR, os.path.join(os.getcwd(), "frontend", "dist"))
    if os.path.isdir(ui_dir):
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
