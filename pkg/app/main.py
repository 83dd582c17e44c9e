"""
FastAPI dialogue service: loads every LM once at startup and switches the
active model per turn for each live session.
"""
import uuid
from contextlib import asynccontextmanager
from typing import List, Optional

import structlog
from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.core.config import settings
from app.core.exceptions import CtxLMError, DialogueError, SessionNotFoundError
from app.core.logging import configure_logging
from app.models.schemas import (
    SPECIFIC_CLASSES,
    HealthResponse,
    LMClassId,
    ModelRouteView,
    SessionResponse,
    TranscriptResponse,
    TurnRequest,
    TurnView,
)
from app.services.dialog_service import DialogueSession, SessionManager, dialog_service
from app.services.evaluation_service import evaluation_service
from app.services.registry_service import MANIFEST_NAME, registry_service

logger = structlog.get_logger(__name__)

# Global session manager, set at startup
session_manager: Optional[SessionManager] = None


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Load the model pool once; sessions only switch between resident models."""
    global session_manager

    configure_logging(settings.log_level, settings.log_json)
    logger.info("api_starting", models_dir=str(settings.models_dir))
    try:
        if (settings.models_dir / MANIFEST_NAME).exists():
            pool = registry_service.load(settings)
        else:
            logger.info("training_models_in_memory")
            pool = evaluation_service.build_models(settings).pool
        session_manager = dialog_service.session_manager(pool, settings)
    except CtxLMError as e:
        logger.error("model_pool_unavailable", error=str(e))
        session_manager = None

    yield

    logger.info("api_stopping", sessions=len(session_manager) if session_manager else 0)
    session_manager = None


app = FastAPI(
    title=settings.app_name,
    description="Spoken-dialogue service with context-dependent language models",
    version=settings.app_version,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.middleware("http")
async def track_requests(request: Request, call_next):
    """Tag every request with a unique id."""
    request_id = str(uuid.uuid4())
    request.state.request_id = request_id
    response = await call_next(request)
    response.headers["X-Request-ID"] = request_id
    return response


@app.exception_handler(Exception)
async def general_exception_handler(request: Request, exc: Exception):
    request_id = getattr(request.state, "request_id", str(uuid.uuid4()))
    logger.error("request_failed", request_id=request_id, error=str(exc), exc_info=True)
    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "request_id": request_id,
            "detail": str(exc) if settings.debug else "An unexpected error occurred",
        },
    )


def get_session_manager() -> SessionManager:
    if session_manager is None:
        raise HTTPException(status_code=503, detail="Models not loaded")
    return session_manager


def _session_view(session: DialogueSession) -> SessionResponse:
    turns = [
        TurnView(
            index=entry.index,
            speaker=entry.speaker,
            act=entry.label if entry.speaker == "S" else None,
            prompt=entry.prompt or None,
            tokens=list(entry.tokens),
            frame=entry.frame.to_text() if entry.frame is not None else None,
            active_lm=entry.active_lm.value,
        )
        for entry in session.transcript
    ]
    return SessionResponse(
        session_id=session.session_id,
        phase=session.phase,
        active_lm=session.registry.active.value,
        turns=turns,
    )


@app.get("/health", response_model=HealthResponse)
async def health_check():
    return HealthResponse(
        status="healthy" if session_manager is not None else "degraded",
        models_loaded=session_manager is not None,
        active_sessions=len(session_manager) if session_manager is not None else 0,
        version=settings.app_version,
    )


@app.get(f"{settings.api_prefix}/models", response_model=List[ModelRouteView])
async def list_models(manager: SessionManager = Depends(get_session_manager)):
    """Routing of every LM class, with the training material behind it."""
    pool = manager.pool
    views = []
    for lm_class in (LMClassId.CONTEXT_INDEPENDENT,) + SPECIFIC_CLASSES:
        stats = pool.stats.get(lm_class)
        views.append(ModelRouteView(
            lm_class=lm_class.value,
            routed_to=pool.route(lm_class).value,
            utterances=stats.utterances if stats else None,
            multiword_utterances=stats.multiword_utterances if stats else None,
        ))
    return views


@app.post(f"{settings.api_prefix}/sessions", response_model=SessionResponse, status_code=201)
async def create_session(manager: SessionManager = Depends(get_session_manager)):
    return _session_view(manager.create())


@app.post(f"{settings.api_prefix}/sessions/{{session_id}}/turns", response_model=SessionResponse)
async def post_turn(session_id: str, turn: TurnRequest,
                    manager: SessionManager = Depends(get_session_manager)):
    """Send one typed user turn; the reply carries the next system act."""
    try:
        session = manager.turn(session_id, turn.text)
    except SessionNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except DialogueError as e:
        raise HTTPException(status_code=409, detail=str(e))
    return _session_view(session)


@app.get(f"{settings.api_prefix}/sessions/{{session_id}}/transcript", response_model=TranscriptResponse)
async def get_transcript(session_id: str, manager: SessionManager = Depends(get_session_manager)):
    try:
        session = manager.get(session_id)
    except SessionNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    return TranscriptResponse(session_id=session.session_id, lines=session.transcript_lines())
