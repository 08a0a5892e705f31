"""Simulation middleware: answers queries locally from a stored basis.

The client warms up from its basis store (how much it loads depends on the
strategy), then serves queries without network traffic as long as quality
holds.  The adaptive strategy falls back to the server for a basis update
when a query's residual bound cannot be met locally; subspace and reorder
keep only block metadata in memory and stream exactly the snapshot columns
each answer needs from the store.

Every query appends a ledger record with byte, call and timing accounting,
and subscribers get push events: query-answered, update-started,
update-applied.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import Response, StreamingResponse

from rbsim.full_problem import Parameter, QualitySpec, assemble_problem
from rbsim.protocol import (
    BasisUpdate,
    IdentifierMismatchError,
    ProtocolError,
    UpdateRequest,
    apply_update,
    parse_empty_identifier,
    unpack_update,
)
from rbsim.rbm import MODE_ORTHONORMAL, basis_identifier, empty_basis
from rbsim.store import BasisNotFoundError, BasisStore, StoreFormatError, write_basis
from rbsim.strategies import (
    QualityUnreachableError,
    Query,
    QueryAnswer,
    _memory_loader,
    answer_basic,
    answer_reorder,
    answer_subspace,
    solve_reduced,
)

log = logging.getLogger(__name__)

STRATEGIES = ("basic", "adaptive", "subspace", "reorder")

FRAME_MAGIC = b"RBQF"
_FRAME = struct.Struct("<4sIIBBBxddQI4x")
STRATEGY_CODES = {name: i for i, name in enumerate(STRATEGIES)}


class ChannelError(Exception):
    """The server could not be reached or answered with an error."""


class HttpServerChannel:
    """Server access over HTTP with call/byte accounting.

    ``client`` may be any httpx.Client-compatible object (tests inject an
    in-process ASGI test client); by default a real connection pool against
    ``base_url`` is used.
    """

    def __init__(self, base_url: str | None = None, client: httpx.Client | None = None):
        if client is None:
            if base_url is None:
                raise ValueError("need a base url or an injected client")
            client = httpx.Client(base_url=base_url, timeout=600.0)
        self._client = client
        self.network_calls = 0
        self.bytes_sent = 0
        self.bytes_received = 0

    def _post(self, path: str, payload: dict) -> httpx.Response:
        body = json.dumps(payload).encode()
        self.network_calls += 1
        self.bytes_sent += len(body)
        try:
            resp = self._client.post(path, content=body,
                                     headers={"content-type": "application/json"})
        except httpx.HTTPError as exc:
            raise ChannelError(f"server unreachable: {exc}") from exc
        self.bytes_received += len(resp.content)
        if resp.status_code != 200:
            raise ChannelError(f"server answered {resp.status_code}: {resp.text}")
        return resp

    def _get(self, path: str) -> httpx.Response:
        self.network_calls += 1
        try:
            resp = self._client.get(path)
        except httpx.HTTPError as exc:
            raise ChannelError(f"server unreachable: {exc}") from exc
        self.bytes_received += len(resp.content)
        if resp.status_code != 200:
            raise ChannelError(f"server answered {resp.status_code}: {resp.text}")
        return resp

    def request_update(self, request: UpdateRequest) -> BasisUpdate:
        resp = self._post(f"/bases/{request.identifier}/update",
                          {"parameter": list(request.parameter.as_array())})
        return unpack_update(resp.content)

    def fetch_basis(self, identifier: str, destination: Path) -> int:
        resp = self._get(f"/bases/{identifier}")
        destination = Path(destination)
        destination.parent.mkdir(parents=True, exist_ok=True)
        destination.write_bytes(resp.content)
        return len(resp.content)

    def submit_generation(self, request) -> str:
        return self._post("/bases", request.to_json()).json()["job"]

    def job_status(self, job_id: str) -> dict:
        return self._get(f"/jobs/{job_id}").json()

    def solve_remote(self, mu: Parameter, discretization: int) -> np.ndarray:
        resp = self._post("/solve", {"parameter": list(mu.as_array()),
                                     "discretization": discretization})
        return np.frombuffer(resp.content, dtype="<f8").copy()


@dataclass
class QueryRecord:
    """Ledger entry: what one query cost and what it delivered."""

    seq: int
    parameter: Parameter
    strategy: str
    snapshots_used: int
    residual_norm: float
    bound: float
    quality_ok: bool
    served_remotely: bool
    bytes_read: int
    network_calls: int
    updated: bool = False
    timings: dict = field(default_factory=dict)  # phase -> seconds


class SimulationClient:
    """Middleware state for one basis and one answering strategy."""

    def __init__(self, store: BasisStore, identifier: str, strategy: str = "basic",
                 *, channel: HttpServerChannel | None = None, max_res: float = 1.0):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}, have {STRATEGIES}")
        self.store = store
        self.identifier = identifier
        self.strategy = strategy
        self.channel = channel
        self.max_res = max_res  # bound when starting from an empty sentinel basis
        self.basis = None
        self.basis_version = 0
        self.reader = None
        self.ledger: list = []
        self._subscribers: list = []
        self._lock = threading.RLock()
        self.warmed = False

    def close(self):
        if self.reader is not None:
            self.reader.close()
            self.reader = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- events ---------------------------------------------------------------

    def subscribe(self, callback):
        """Register callback(event_name, payload_dict); returns unsubscribe."""
        self._subscribers.append(callback)

        def unsubscribe():
            if callback in self._subscribers:
                self._subscribers.remove(callback)
        return unsubscribe

    def _emit(self, event: str, payload: dict):
        for cb in list(self._subscribers):
            try:
                cb(event, payload)
            except Exception:
                log.exception("event subscriber failed")

    # -- setup ----------------------------------------------------------------

    def _open_reader(self):
        try:
            return self.store.open(self.identifier)
        except (BasisNotFoundError, StoreFormatError) as exc:
            if self.channel is None:
                raise
            log.warning("basis %s unusable locally (%s); fetching from server",
                        self.identifier, exc)
            self.channel.fetch_basis(self.identifier, self.store.path_for(self.identifier))
            return self.store.open(self.identifier)

    def warm_setup(self) -> dict:
        """Load what the strategy needs up front; returns a byte report.

        basic/adaptive pull the whole container into memory; subspace and
        reorder read only the reduced blocks and keep the file open so each
        query can stream exactly the snapshot columns it uses.  An adaptive
        (or basic) client may start from an empty sentinel identifier with no
        file at all; the first adaptive query then fetches the first snapshot.
        """
        with self._lock:
            self.close()
            t0 = time.perf_counter()
            before = self.store.counters.bytes_read

            sentinel = parse_empty_identifier(self.identifier)
            if sentinel is not None and not self.store.has(self.identifier):
                if self.strategy not in ("basic", "adaptive"):
                    raise BasisNotFoundError(
                        f"{self.strategy} strategy needs a stored basis, "
                        f"got empty sentinel {self.identifier!r}")
                disc, mode = sentinel
                quality = QualitySpec(disc, self.max_res)
                op, rhs = assemble_problem(quality)
                self.basis = empty_basis(op, rhs, quality, mode)
                sections = {}
            else:
                reader = self._open_reader()
                head = min(offset for offset, _ in reader.sections.values())
                sections = {"header": head}
                if self.strategy in ("basic", "adaptive"):
                    self.basis = reader.load_full()
                    reader.close()
                    for name, (_, nbytes) in reader.sections.items():
                        sections[name] = nbytes
                else:
                    self.basis = reader.load_metadata()
                    self.reader = reader  # stays open for per-query column loads
                    for name, (_, nbytes) in reader.sections.items():
                        sections[name] = 0 if name == "snapshots" else nbytes

            self.warmed = True
            self.basis_version += 1
            report = {
                "strategy": self.strategy,
                "identifier": self.identifier,
                "n": self.basis.n,
                "discretization": self.basis.quality.discretization,
                "bytes_read": self.store.counters.bytes_read - before,
                "bytes_by_section": sections,
                "seconds": time.perf_counter() - t0,
            }
            log.info("warm setup: %s", report)
            return report

    # -- queries ----------------------------------------------------------------

    def query(self, parameter: Parameter, max_res: float | None = None) -> QueryAnswer:
        return self.handle_query(Query(parameter, max_res))

    def handle_query(self, query: Query, *, strategy: str | None = None) -> QueryAnswer:
        """Answer one query; ``strategy`` overrides the configured one.

        The override is for what-if probing and supports basic, subspace and
        reorder; adaptive stays a client-level configuration because it
        mutates the basis.
        """
        if not self.warmed:
            raise RuntimeError("call warm_setup() before serving queries")
        strat = self.strategy if strategy is None else strategy
        if strat not in STRATEGIES:
            raise ValueError(f"unknown strategy {strat!r}, have {STRATEGIES}")
        if strat == "adaptive" and strat != self.strategy:
            raise ValueError("adaptive cannot be a per-query override")
        with self._lock:
            seq = len(self.ledger)
            bytes_before = self.store.counters.bytes_read
            calls_before = self.channel.network_calls if self.channel else 0
            t0 = time.perf_counter()
            timings: dict = {}

            handler = getattr(self, f"_answer_{strat}")
            answer, updated = handler(query.resolve_bound(self.basis.quality), timings)

            timings["total"] = time.perf_counter() - t0
            record = QueryRecord(
                seq=seq,
                parameter=query.parameter,
                strategy=strat,
                snapshots_used=answer.snapshots_used,
                residual_norm=answer.residual_norm,
                bound=query.resolve_bound(self.basis.quality).bound,
                quality_ok=answer.quality_ok,
                served_remotely=answer.served_remotely,
                bytes_read=self.store.counters.bytes_read - bytes_before,
                network_calls=(self.channel.network_calls if self.channel else 0) - calls_before,
                updated=updated,
                timings=timings,
            )
            self.ledger.append(record)
            answer.metrics.update(bytes_read=record.bytes_read,
                                  network_calls=record.network_calls,
                                  basis_version=self.basis_version)
            self._emit("query-answered", {
                "seq": seq,
                "parameter": list(query.parameter.as_array()),
                "strategy": strat,
                "m": answer.snapshots_used,
                "n": self.basis.n,
                "residual_norm": answer.residual_norm,
                "bound": record.bound,
                "quality_ok": answer.quality_ok,
                "bytes_read": record.bytes_read,
                "basis_version": self.basis_version,
                "updated": updated,
            })
            return answer

    # -- strategy implementations ----------------------------------------------

    def _loader(self):
        """Column source for reconstruction: memory when V is loaded, else file."""
        if self.basis.has_snapshots:
            return _memory_loader(self.basis)
        return self.reader.load_snapshots

    def _answer_basic(self, query: Query, timings: dict):
        t = time.perf_counter()
        answer = answer_basic(self.basis, query, load_columns=self._loader())
        timings["solve"] = time.perf_counter() - t
        return answer, False

    def _answer_subspace(self, query: Query, timings: dict):
        t = time.perf_counter()
        try:
            answer = answer_subspace(self.basis, query, load_columns=self._loader())
        except QualityUnreachableError:
            answer = self._degraded_answer(query, "subspace")
        timings["solve"] = time.perf_counter() - t
        return answer, False

    def _answer_reorder(self, query: Query, timings: dict):
        t = time.perf_counter()
        try:
            answer = answer_reorder(self.basis, query, load_columns=self._loader())
        except QualityUnreachableError:
            answer = self._degraded_answer(query, "reorder")
        timings["solve"] = time.perf_counter() - t
        return answer, False

    def _degraded_answer(self, query: Query, strategy: str) -> QueryAnswer:
        """Full-basis answer, flagged: local data cannot reach the bound."""
        sol = solve_reduced(self.basis, query.parameter, method=self._method())
        log.warning("quality unreachable at %s (residual %.3e > %.3e); serving degraded",
                    query.parameter, sol.residual_norm, query.bound)
        values = self._loader()(self.basis.n) @ sol.coefficients
        return QueryAnswer(
            parameter=query.parameter,
            values=values,
            residual_norm=sol.residual_norm,
            snapshots_used=self.basis.n,
            strategy=strategy,
            quality_ok=False,
        )

    def _method(self) -> str:
        return "direct" if self.basis.mode == MODE_ORTHONORMAL else "lstsq"

    def _answer_adaptive(self, query: Query, timings: dict):
        t = time.perf_counter()
        sol = solve_reduced(self.basis, query.parameter, method=self._method())
        timings["solve"] = time.perf_counter() - t
        if sol.residual_norm <= query.bound:
            values = self.basis.V @ sol.coefficients
            return QueryAnswer(
                parameter=query.parameter,
                values=values,
                residual_norm=sol.residual_norm,
                snapshots_used=self.basis.n,
                strategy="adaptive",
                quality_ok=True,
            ), False

        if self.channel is None:
            log.warning("adaptive without a server channel cannot update; degraded answer")
            return QueryAnswer(
                parameter=query.parameter,
                values=self.basis.V @ sol.coefficients,
                residual_norm=sol.residual_norm,
                snapshots_used=self.basis.n,
                strategy="adaptive",
                quality_ok=False,
            ), False

        t = time.perf_counter()
        self._apply_server_update(query)
        timings["update"] = time.perf_counter() - t

        t = time.perf_counter()
        sol = solve_reduced(self.basis, query.parameter, method=self._method())
        values = self.basis.V @ sol.coefficients
        timings["resolve"] = time.perf_counter() - t
        return QueryAnswer(
            parameter=query.parameter,
            values=values,
            residual_norm=sol.residual_norm,
            snapshots_used=self.basis.n,
            strategy="adaptive",
            quality_ok=sol.residual_norm <= query.bound,
        ), True

    def _apply_server_update(self, query: Query):
        old_ident = basis_identifier(self.basis)
        self._emit("update-started", {
            "identifier": old_ident,
            "parameter": list(query.parameter.as_array()),
            "n": self.basis.n,
        })
        update = self.channel.request_update(UpdateRequest(old_ident, query.parameter))
        try:
            self.basis = apply_update(self.basis, update)
        except (IdentifierMismatchError, ProtocolError) as exc:
            # resync: our state diverged from the server's; fetch its version
            log.warning("update did not chain (%s); resyncing full basis", exc)
            self.channel.fetch_basis(update.new_identifier,
                                     self.store.path_for(update.new_identifier))
            with self.store.open(update.new_identifier) as reader:
                self.basis = reader.load_full()
        self.identifier = basis_identifier(self.basis)
        write_basis(self.basis, self.store.path_for(self.identifier))
        self.basis_version += 1
        self._emit("update-applied", {
            "identifier": self.identifier,
            "n": self.basis.n,
            "basis_version": self.basis_version,
        })


def encode_frame(answer: QueryAnswer, discretization: int, bound: float,
                 basis_version: int) -> bytes:
    """Binary answer frame: fixed header plus the raw f64 grid."""
    header = _FRAME.pack(
        FRAME_MAGIC,
        discretization,
        answer.snapshots_used,
        STRATEGY_CODES[answer.strategy],
        1 if answer.quality_ok else 0,
        1 if answer.served_remotely else 0,
        answer.residual_norm,
        bound,
        int(answer.metrics.get("bytes_read", 0)),
        basis_version,
    )
    return header + answer.values.astype("<f8").tobytes()


def create_middleware_app(client: SimulationClient, *, ui_dir=None):
    """Client-facing application: query endpoint, event stream, static UI."""
    app = FastAPI(title="rbsim middleware")
    app.state.client = client

    @app.post("/query")
    async def query(request: Request):
        data = await request.json()
        try:
            mu = Parameter.from_array(data["parameter"])
            max_res = data.get("max_res")
            q = Query(mu, None if max_res is None else float(max_res))
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        override = data.get("strategy")
        try:
            from starlette.concurrency import run_in_threadpool
            answer = await run_in_threadpool(
                lambda: client.handle_query(q, strategy=override))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except ChannelError as exc:
            raise HTTPException(status_code=502, detail=str(exc))
        bound = q.resolve_bound(client.basis.quality).bound
        frame = encode_frame(answer, client.basis.quality.discretization, bound,
                             client.basis_version)
        return Response(content=frame, media_type="application/octet-stream")

    @app.get("/status")
    def status():
        return {
            "strategy": client.strategy,
            "identifier": client.identifier,
            "warmed": client.warmed,
            "n": client.basis.n if client.basis else None,
            "discretization": client.basis.quality.discretization if client.basis else None,
            "max_res": client.basis.quality.max_res if client.basis else None,
            "basis_version": client.basis_version,
            "queries": len(client.ledger),
            "store_bytes_read": client.store.counters.bytes_read,
            "network_calls": client.channel.network_calls if client.channel else 0,
        }

    @app.get("/events")
    async def events():
        import asyncio
        import queue as queue_mod

        q: queue_mod.Queue = queue_mod.Queue()
        unsubscribe = client.subscribe(lambda ev, payload: q.put((ev, payload)))
        q.put(("hello", {
            "strategy": client.strategy,
            "basis_version": client.basis_version,
            "n": client.basis.n if client.basis else None,
        }))

        async def stream():
            try:
                while True:
                    try:
                        ev, payload = q.get_nowait()
                    except queue_mod.Empty:
                        await asyncio.sleep(0.05)
                        yield ": keep-alive\n\n"
                        continue
                    yield f"event: {ev}\ndata: {json.dumps(payload)}\n\n"
            finally:
                unsubscribe()

        return StreamingResponse(stream(), media_type="text/event-stream")

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
