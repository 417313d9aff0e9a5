"""HTTP surface of the annotation service.

All request and response bodies use the corpus record schemas.  When an
auth token is configured (``QAPYRAMID_ANNOTATE_TOKEN``), every request
must carry it as a bearer token.
"""

from __future__ import annotations

import os

from fastapi import Depends, FastAPI, HTTPException, Query, Request
from pydantic import BaseModel, Field

from ..corpus import record_from_dict
from ..errors import InputError
from .service import AnnotationService

TOKEN_VAR = "QAPYRAMID_ANNOTATE_TOKEN"


class ProjectBody(BaseModel):
    project_id: str
    references: list[dict]
    summaries: list[dict] = Field(default_factory=list)
    config: dict = Field(default_factory=dict)


class SubmissionBody(BaseModel):
    worker_id: str
    payload: dict


class QualifyBody(BaseModel):
    kind: str
    qualified: bool = True


def create_app(service: AnnotationService, token: str | None = None) -> FastAPI:
    """Build the API app around a service instance.

    ``token`` falls back to the environment; with no token configured the
    API is open (development mode).
    """
    if token is None:
        token = os.environ.get(TOKEN_VAR)
    app = FastAPI(title="qapyramid annotation service")

    def check_auth(request: Request) -> None:
        if not token:
            return
        header = request.headers.get("Authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or bad bearer token")

    def wrap(fn):
        try:
            return fn()
        except InputError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/projects")
    def list_projects(_: None = Depends(check_auth)):
        return service.list_projects()

    @app.post("/projects")
    def create_project(body: ProjectBody, _: None = Depends(check_auth)):
        def run():
            references = [record_from_dict("references", r, "request")
                          for r in body.references]
            summaries = [record_from_dict("summaries", s, "request")
                         for s in body.summaries]
            return service.create_project(body.project_id, references, summaries,
                                          body.config)
        return wrap(run)

    @app.get("/tasks/next")
    def next_task(worker: str = Query(...), kind: str = Query(...),
                  _: None = Depends(check_auth)):
        task = wrap(lambda: service.next_task(worker, kind))
        return task if task is not None else {"task": None}

    @app.post("/tasks/{task_id}/submissions")
    def submit(task_id: str, body: SubmissionBody, _: None = Depends(check_auth)):
        return wrap(lambda: service.submit(task_id, body.worker_id, body.payload))

    @app.get("/projects/{project_id}/agreement")
    def agreement(project_id: str, _: None = Depends(check_auth)):
        return wrap(lambda: service.agreement_dashboard(project_id))

    @app.get("/projects/{project_id}/export")
    def export(project_id: str, partial: bool = False, _: None = Depends(check_auth)):
        return wrap(lambda: service.export_final(project_id, partial=partial))

    @app.post("/workers/{worker_id}/qualify")
    def qualify(worker_id: str, body: QualifyBody, _: None = Depends(check_auth)):
        return wrap(lambda: service.qualify(worker_id, body.kind, body.qualified))

    return app
