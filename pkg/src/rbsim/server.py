"""HTTP face of the basis server.

Endpoints:

    POST /bases               submit a generation request -> {"job": id}
    GET  /jobs/{id}           job status, eventually the basis identifier
    GET  /bases/{id}          download the .rbb container
    POST /bases/{id}/update   one-snapshot extension -> binary update
    POST /solve               full-order solve (server-side baseline)

Generation runs on a small worker pool; everything else is synchronous.
"""

from __future__ import annotations

import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response

from rbsim.full_problem import Parameter, QualitySpec, SolveError, assemble_problem, solve_full
from rbsim.generation import NonConvergenceError, TrainingSet, greedy_generate, reorder_generate
from rbsim.protocol import (
    BasisRequest,
    ProtocolError,
    UnknownBasisError,
    UpdateRequest,
    pack_update,
    serve_update_request,
)
from rbsim.store import BasisStore

log = logging.getLogger(__name__)


@dataclass
class Job:
    request: BasisRequest
    status: str = "pending"  # pending | running | done | error
    identifier: str | None = None
    error: str | None = None
    basis_n: int | None = None

    def to_json(self) -> dict:
        return {"status": self.status, "identifier": self.identifier,
                "error": self.error, "basis_n": self.basis_n}


@dataclass
class ServerState:
    store: BasisStore
    executor: ThreadPoolExecutor
    jobs: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)
    job_ids: itertools.count = field(default_factory=lambda: itertools.count(1))


def _run_generation(state: ServerState, job_id: str):
    with state.lock:
        job = state.jobs[job_id]
        job.status = "running"
    req = job.request
    try:
        train = TrainingSet.preset(req.preset, req.step)
        kwargs = dict(seed=req.seed, stop_n=req.stop_n)
        if req.mode is not None:
            kwargs["mode"] = req.mode
        if req.method == "greedy":
            result = greedy_generate(train, req.quality, **kwargs)
        else:
            result = reorder_generate(train, req.margin, req.quality, **kwargs)
        ident, _ = state.store.save(result.basis)
        with state.lock:
            job.status = "done"
            job.identifier = ident
            job.basis_n = result.basis.n
    except (NonConvergenceError, ValueError) as exc:
        log.warning("generation job %s failed: %s", job_id, exc)
        with state.lock:
            job.status = "error"
            job.error = str(exc)


def create_server_app(store_dir, *, workers: int = 2) -> FastAPI:
    """Server application over a basis store directory."""
    state = ServerState(
        store=BasisStore(Path(store_dir)),
        executor=ThreadPoolExecutor(max_workers=workers, thread_name_prefix="rbsim-gen"),
    )
    app = FastAPI(title="rbsim basis server")
    app.state.rbsim = state

    @app.post("/bases")
    async def submit_basis(request: Request):
        try:
            req = BasisRequest.from_json(await request.json())
            TrainingSet.preset(req.preset, req.step)  # validate before queueing
        except (ProtocolError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        with state.lock:
            job_id = str(next(state.job_ids))
            state.jobs[job_id] = Job(request=req)
        state.executor.submit(_run_generation, state, job_id)
        return {"job": job_id}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        with state.lock:
            job = state.jobs.get(job_id)
            if job is None:
                raise HTTPException(status_code=404, detail="unknown job")
            return job.to_json()

    @app.get("/bases/{identifier}")
    def download_basis(identifier: str):
        path = state.store.path_for(identifier)
        if not path.exists():
            raise HTTPException(status_code=404, detail="unknown basis")
        return Response(content=path.read_bytes(), media_type="application/octet-stream")

    @app.post("/bases/{identifier}/update")
    async def update_basis(identifier: str, request: Request):
        data = await request.json()
        try:
            req = UpdateRequest.from_json({"identifier": identifier,
                                           "parameter": data["parameter"]})
        except (ProtocolError, KeyError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            update = serve_update_request(state.store, req)
        except UnknownBasisError:
            raise HTTPException(status_code=404, detail="unknown basis")
        except SolveError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return Response(content=pack_update(update), media_type="application/octet-stream")

    @app.post("/solve")
    async def solve(request: Request):
        data = await request.json()
        try:
            mu = Parameter.from_array(data["parameter"])
            quality = QualitySpec(int(data["discretization"]), 1.0)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        op, rhs = assemble_problem(quality)
        try:
            values, _ = solve_full(op, rhs, mu)
        except SolveError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return Response(content=np.asarray(values).astype("<f8").tobytes(),
                        media_type="application/octet-stream")

    return app
