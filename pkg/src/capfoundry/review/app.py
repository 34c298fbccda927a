"""HTTP front for the review service.

Rater-facing payloads (next pair, vote ack, their error bodies) never
contain caption source identifiers; only the admin-gated results endpoint
names sources. The admin token comes from the REVIEW_ADMIN_TOKEN
environment variable and is checked against the x-admin-token header;
with the variable unset the results endpoint stays closed.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Header, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from capfoundry.review.core import (
    DuplicateVote,
    InvalidStudy,
    NoVotes,
    ReviewError,
    ReviewService,
    UnknownItem,
    UnknownRater,
    UnknownStudy,
    UnservedItem,
)

ADMIN_TOKEN_ENV = "REVIEW_ADMIN_TOKEN"

_STATUS: list[tuple[type, int]] = [
    (UnknownStudy, 404),
    (UnknownItem, 404),
    (UnknownRater, 403),
    (DuplicateVote, 409),
    (UnservedItem, 409),
    (NoVotes, 409),
    (InvalidStudy, 422),
    (ReviewError, 400),
]


def _status_for(exc: ReviewError) -> int:
    for kind, code in _STATUS:
        if isinstance(exc, kind):
            return code
    return 400


def create_app(service: ReviewService, ui_dir: Optional[str | Path] = None) -> FastAPI:
    app = FastAPI(title="caption review service", docs_url=None, redoc_url=None)

    @app.exception_handler(ReviewError)
    async def review_error(request: Request, exc: ReviewError):
        # Error bodies are rater-facing: the class name and message never
        # embed source identifiers.
        return JSONResponse(
            status_code=_status_for(exc),
            content={"error": type(exc).__name__, "message": str(exc)},
        )

    @app.post("/studies", status_code=201)
    async def create_study(config: dict):
        return service.create_study(config)

    @app.get("/studies/{study_id}/next")
    async def next_pair(study_id: str, rater: str):
        return service.next_pair(study_id, rater)

    @app.post("/studies/{study_id}/votes")
    async def submit_vote(study_id: str, vote: dict):
        for key in ("rater", "item_id", "choice"):
            if not isinstance(vote.get(key), str):
                raise ReviewError(f"vote.{key} must be a string")
        return service.submit_vote(study_id, vote["rater"], vote["item_id"], vote["choice"])

    @app.get("/studies/{study_id}/results")
    async def results(study_id: str, x_admin_token: Optional[str] = Header(default=None)):
        expected = os.environ.get(ADMIN_TOKEN_ENV)
        if not expected or x_admin_token != expected:
            return JSONResponse(
                status_code=403,
                content={"error": "Forbidden", "message": "valid x-admin-token required"},
            )
        return service.results(study_id)

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
