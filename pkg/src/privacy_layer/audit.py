"""Append-only NDJSON audit trail."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

ACTIONS = ("query", "admin_change", "denied")
OUTCOMES = ("allow", "deny")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _parse_ts(value: Union[str, datetime]) -> datetime:
    if isinstance(value, datetime):
        ts = value
    else:
        ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


@dataclass(frozen=True)
class AuditEntry:
    timestamp: str
    user_id: str
    action: str
    measure_ids: Tuple[str, ...]
    query_digest: str
    outcome: str
    detail: str = ""

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown audit action {self.action!r}")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown audit outcome {self.outcome!r}")
        object.__setattr__(self, "measure_ids", tuple(self.measure_ids))

    def to_json(self) -> dict:
        out = asdict(self)
        out["measure_ids"] = list(self.measure_ids)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "AuditEntry":
        return cls(
            timestamp=data["timestamp"],
            user_id=data["user_id"],
            action=data["action"],
            measure_ids=tuple(data.get("measure_ids", ())),
            query_digest=data.get("query_digest", ""),
            outcome=data["outcome"],
            detail=data.get("detail", ""),
        )


class AuditLog:
    """In-memory audit history, mirrored line-by-line to ``path`` when given.

    Existing lines in ``path`` are loaded at construction; nothing is ever
    rewritten or truncated.
    """

    def __init__(self, path: Optional[Union[str, os.PathLike]] = None, fsync: bool = False):
        self.path = os.fspath(path) if path is not None else None
        self.fsync = fsync
        self._entries: List[AuditEntry] = []
        self._lock = threading.Lock()
        if self.path and os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        self._entries.append(AuditEntry.from_json(json.loads(line)))
                    except (ValueError, KeyError) as exc:
                        logger.warning("skipping malformed audit line %d: %s", lineno, exc)

    def append(self, entry: AuditEntry) -> AuditEntry:
        line = json.dumps(entry.to_json(), separators=(",", ":"), ensure_ascii=False)
        with self._lock:
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            self._entries.append(entry)
        return entry

    def record(self, user_id, action, outcome, measure_ids=(), query_digest="", detail="") -> AuditEntry:
        return self.append(
            AuditEntry(utc_now(), user_id, action, tuple(measure_ids), query_digest, outcome, detail)
        )

    def entries(self) -> Tuple[AuditEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def query(self, user_id=None, since=None, outcome=None) -> List[AuditEntry]:
        """Matching entries ordered by timestamp (append order breaks ties)."""
        since_ts = _parse_ts(since) if since is not None else None
        out = []
        for e in self.entries():
            if user_id is not None and e.user_id != user_id:
                continue
            if outcome is not None and e.outcome != outcome:
                continue
            if since_ts is not None and _parse_ts(e.timestamp) < since_ts:
                continue
            out.append(e)
        return sorted(out, key=lambda e: _parse_ts(e.timestamp))

    def __len__(self) -> int:
        return len(self._entries)
