"""Wires rule engine, table store and customizer to on-disk state.

Table data is never copied: the catalog (``tables.json``) records, for
each table, its manifest path and the ordered list of CSV files loaded
into it.  Version *n* of a table is the concatenation of its first *n*
CSV loads.
"""

from __future__ import annotations

import json
import os
import threading
from typing import Dict, List, Optional

from ._fileio import atomic_write_json
from .audit import AuditLog
from .config import LayerConfig
from .customizer import DataRangeCustomizer
from .errors import InvalidSpec, UnknownTable
from .rules import RuleEngine
from .store import DatasetStore, SchemaManifest, TableVersion


def _read(path: str) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


class PrivacyLayer:
    def __init__(self, config: LayerConfig):
        self.config = config
        digest = bytes.fromhex(config.admin_key_digest) if config.admin_key_digest else None
        self.engine = RuleEngine.load(
            config.path("policies"),
            config.path("portfolio"),
            audit=AuditLog(config.path("audit"), fsync=config.audit_fsync),
            admin_key_digest=digest,
        )
        self.store = DatasetStore(config.max_table_versions or None)
        self.customizer = DataRangeCustomizer(self.engine, self.store)
        self._loaded: Dict[str, int] = {}
        self._lock = threading.Lock()
        self.sync_tables()

    @classmethod
    def open(cls, config_path: Optional[str] = None, data_dir: Optional[str] = None) -> "PrivacyLayer":
        if config_path:
            cfg = LayerConfig.load(config_path, data_dir)
        else:
            cfg = LayerConfig(data_dir=data_dir or ".")
        return cls(cfg)

    # -- catalog ---------------------------------------------------------------

    def _catalog(self) -> dict:
        path = self.config.path("catalog")
        if not os.path.exists(path):
            return {"tables": {}}
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def _resolve(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(self.config.data_dir, p)

    def sync_tables(self) -> None:
        """Publish any CSV loads recorded in the catalog but not yet in memory."""
        with self._lock:
            for table_id, entry in self._catalog().get("tables", {}).items():
                loads: List[str] = entry.get("loads", [])
                done = self._loaded.get(table_id, 0)
                if done >= len(loads):
                    continue
                manifest = SchemaManifest.from_json(_read(self._resolve(entry["manifest"])))
                for csv_path in loads[done:]:
                    self.store.ingest(table_id, _read(self._resolve(csv_path)), manifest)
                self._loaded[table_id] = len(loads)

    def ingest(self, table_id: str, csv_path: str, manifest_path: str) -> TableVersion:
        """Load a CSV into ``table_id`` (creating it or appending a new version)."""
        manifest = SchemaManifest.from_json(_read(manifest_path))
        csv_text = _read(csv_path)
        self.sync_tables()
        with self._lock:
            catalog = self._catalog()
            tables = catalog.setdefault("tables", {})
            entry = tables.get(table_id)
            if entry is not None:
                known = SchemaManifest.from_json(_read(self._resolve(entry["manifest"])))
                if known != manifest:
                    raise InvalidSpec(f"manifest differs from the one registered for {table_id!r}")
            table = self.store.ingest(table_id, csv_text, manifest)
            if entry is None:
                entry = tables[table_id] = {"manifest": os.path.abspath(manifest_path), "loads": []}
            entry["loads"].append(os.path.abspath(csv_path))
            atomic_write_json(self.config.path("catalog"), catalog)
            self._loaded[table_id] = len(entry["loads"])
        return table

    def append_csv_text(self, table_id: str, csv_text: str) -> TableVersion:
        """Append rows received in memory; the CSV is kept under ``data_dir/tables``."""
        self.sync_tables()
        with self._lock:
            catalog = self._catalog()
            entry = catalog.get("tables", {}).get(table_id)
            if entry is None:
                raise UnknownTable(f"unknown table {table_id!r}")
            table = self.store.append(table_id, csv_text)
            folder = os.path.join(self.config.data_dir, "tables", table_id)
            os.makedirs(folder, exist_ok=True)
            path = os.path.join(folder, f"load-{table.version:06d}.csv")
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(csv_text)
            entry["loads"].append(os.path.abspath(path))
            atomic_write_json(self.config.path("catalog"), catalog)
            self._loaded[table_id] = len(entry["loads"])
        return table
