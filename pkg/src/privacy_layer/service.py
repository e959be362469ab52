"""HTTP+JSON facade over the privacy layer.

Query-style endpoints answer with the canonical personalized-data-set JSON
as the whole body; the server-assigned report id travels in the
``X-Report-Id`` response header.
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .customizer import PersonalizedDataSet, QueryDescriptor, to_canonical_json
from .errors import (
    AccessDenied,
    InvalidQuery,
    InvalidSpec,
    NotAdministrator,
    PrivacyLayerError,
    StaleTableVersion,
    UnknownColumn,
    UnknownMeasure,
    UnknownReport,
    UnknownRole,
    UnknownTable,
    UnknownUser,
    ValidationFailed,
    CellTypeError,
    HeaderMismatch,
)
from .layer import PrivacyLayer
from .rules import ADMIN_ID, RoleDef, UserProfile, policy_from_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReportRef:
    """What the registry keeps per report: the recipe, never the result."""

    descriptor: QueryDescriptor
    table_version: int
    owner: str


class ReportRegistry:
    """LRU map of report id -> :class:`ReportRef`."""

    def __init__(self, capacity: int = 256):
        self.capacity = max(1, int(capacity))
        self._items: "OrderedDict[str, ReportRef]" = OrderedDict()
        self._lock = threading.Lock()

    def add(self, ref: ReportRef) -> str:
        report_id = uuid.uuid4().hex
        with self._lock:
            self._items[report_id] = ref
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)
        return report_id

    def get(self, report_id: str) -> ReportRef:
        with self._lock:
            try:
                self._items.move_to_end(report_id)
                return self._items[report_id]
            except KeyError:
                raise UnknownReport(f"unknown report {report_id!r}") from None

    def __len__(self) -> int:
        return len(self._items)


class Unauthenticated(PrivacyLayerError):
    pass


_STATUS = [
    (Unauthenticated, 401),
    (NotAdministrator, 403),
    (AccessDenied, 403),
    (ValidationFailed, 422),
    (UnknownUser, 404),
    (UnknownRole, 404),
    (UnknownMeasure, 404),
    (UnknownReport, 404),
    (UnknownTable, 404),
    (StaleTableVersion, 404),
    (UnknownColumn, 422),
    (InvalidQuery, 422),
    (InvalidSpec, 422),
    (HeaderMismatch, 422),
    (CellTypeError, 422),
]


def status_for(exc: Exception) -> int:
    for cls, status in _STATUS:
        if isinstance(exc, cls):
            return status
    return 400


def _bearer(request: Request) -> Optional[str]:
    header = request.headers.get("authorization", "")
    scheme, _, token = header.partition(" ")
    if scheme.lower() != "bearer" or not token.strip():
        return None
    return token.strip()


def create_app(layer: PrivacyLayer, report_capacity: Optional[int] = None) -> FastAPI:
    engine = layer.engine
    customizer = layer.customizer
    registry = ReportRegistry(report_capacity or layer.config.report_capacity)
    app = FastAPI(title="privacy-layer", version="0.1.0")
    app.state.layer = layer
    app.state.registry = registry

    @app.exception_handler(PrivacyLayerError)
    async def _handle(request: Request, exc: PrivacyLayerError):
        body = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ValidationFailed):
            body["violations"] = exc.violations
        return JSONResponse(body, status_code=status_for(exc))

    def caller(request: Request) -> str:
        """User id, or ADMIN_ID for the administrator token."""
        token = _bearer(request)
        if engine.is_admin_token(token):
            return ADMIN_ID
        user_id = engine.authenticate(token)
        if user_id is None:
            raise Unauthenticated("unknown or missing bearer token")
        return user_id

    def require_admin(request: Request):
        who = caller(request)
        if who != ADMIN_ID:
            raise NotAdministrator("administrator key required")
        return engine.local_admin()

    async def json_body(request: Request):
        try:
            return json.loads(await request.body() or b"null")
        except ValueError as exc:
            raise ValidationFailed([f"malformed JSON: {exc}"]) from None

    def report_response(pds: PersonalizedDataSet, report_id: str) -> Response:
        return Response(
            content=to_canonical_json(pds).encode("utf-8"),
            media_type="application/json",
            headers={"X-Report-Id": report_id},
        )

    def register(pds: PersonalizedDataSet) -> str:
        return registry.add(ReportRef(pds.descriptor, pds.table_version, pds.resolved.resolved_for))

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "tables": layer.store.table_ids()}

    @app.post("/v1/query")
    async def query(request: Request):
        who = caller(request)
        body = await json_body(request)
        if not isinstance(body, dict):
            raise InvalidQuery("query body must be a JSON object")
        q = QueryDescriptor.from_json(body)
        if who == ADMIN_ID:
            engine.audit.record(ADMIN_ID, "denied", "deny", [q.measure_id], q.digest(),
                                "administrator key has no data access")
            raise AccessDenied("administrator key has no data access")
        layer.sync_tables()
        pds = customizer.query(q, who)
        return report_response(pds, register(pds))

    @app.post("/v1/reports/{report_id}/redistribute")
    def redistribute(report_id: str, request: Request):
        who = caller(request)
        if who == ADMIN_ID:
            raise AccessDenied("administrator key has no data access")
        ref = registry.get(report_id)
        table = layer.store.get(ref.descriptor.table_id, ref.table_version)
        pds = customizer.personalize(table, ref.descriptor, who)
        return report_response(pds, register(pds))

    @app.post("/v1/reports/{report_id}/refresh")
    def refresh(report_id: str, request: Request):
        who = caller(request)
        ref = registry.get(report_id)
        if who != ref.owner:
            raise AccessDenied("only the original requester may refresh a report")
        layer.sync_tables()
        latest = layer.store.latest(ref.descriptor.table_id)
        pds = customizer.personalize(latest, ref.descriptor, who)
        return report_response(pds, register(pds))

    @app.put("/v1/admin/policies/{measure_id}")
    async def put_policy(measure_id: str, request: Request):
        admin = require_admin(request)
        body = await json_body(request)
        if not isinstance(body, dict):
            raise ValidationFailed(["policy body must be a JSON object"])
        if body.get("measure_id", measure_id) != measure_id:
            raise ValidationFailed(["measure_id in body does not match path"])
        try:
            policy = policy_from_json({**body, "measure_id": measure_id})
        except (KeyError, TypeError) as exc:
            raise ValidationFailed([f"malformed policy: {exc}"]) from None
        admin.upsert_policy(policy)
        return {"ok": True, "measure_id": measure_id}

    @app.put("/v1/admin/roles/{role_id}")
    async def put_role(role_id: str, request: Request):
        admin = require_admin(request)
        body = await json_body(request)
        try:
            role = RoleDef.from_json({**body, "role_id": role_id})
        except (KeyError, TypeError) as exc:
            raise ValidationFailed([f"malformed role: {exc}"]) from None
        admin.upsert_role(role)
        return {"ok": True, "role_id": role_id}

    @app.post("/v1/admin/users")
    async def post_user(request: Request):
        admin = require_admin(request)
        body = await json_body(request)
        try:
            profile = UserProfile.from_json(body)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationFailed([f"malformed user: {exc}"]) from None
        admin.upsert_user(profile)
        return {"ok": True, "user_id": profile.user_id}

    @app.put("/v1/admin/users/{user_id}/role")
    async def put_user_role(user_id: str, request: Request):
        admin = require_admin(request)
        body = await json_body(request)
        if not isinstance(body, dict) or "role_id" not in body:
            raise ValidationFailed(["body must be {\"role_id\": ...}"])
        admin.set_role(user_id, body["role_id"])
        return {"ok": True, "user_id": user_id, "role_id": body["role_id"]}

    @app.get("/v1/admin/audit")
    def get_audit(request: Request, user_id: Optional[str] = None,
                  since: Optional[str] = None, outcome: Optional[str] = None):
        admin = require_admin(request)
        try:
            entries = admin.list_audit(user_id=user_id, since=since, outcome=outcome)
        except ValueError as exc:
            raise ValidationFailed([str(exc)]) from None
        return {"entries": [e.to_json() for e in entries]}

    @app.post("/v1/admin/tables/{table_id}/rows")
    async def append_rows(table_id: str, request: Request):
        require_admin(request)
        text = (await request.body()).decode("utf-8")
        table = layer.append_csv_text(table_id, text)
        return {"table_id": table_id, "version": table.version,
                "row_count": table.row_count, "digest": table.digest}

    return app


def serve(layer: PrivacyLayer) -> None:  # pragma: no cover
    import uvicorn

    host, port = layer.config.host_port
    uvicorn.run(create_app(layer), host=host, port=port)
