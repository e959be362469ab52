"""Deployment configuration shared by the CLI and the HTTP service.

Example ``layer.toml``::

    listen = "127.0.0.1:8080"
    data_dir = "./data"
    admin_key_digest = "9f86d0...15b0f00a08"   # sha256 hex of the admin token
    report_capacity = 256

Paths other than ``data_dir`` are resolved relative to ``data_dir``.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields
from typing import Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class LayerConfig:
    data_dir: str = "."
    listen: str = "127.0.0.1:8080"
    policies: str = "policies.json"
    portfolio: str = "portfolio.json"
    audit: str = "audit.ndjson"
    catalog: str = "tables.json"
    admin_key_digest: str = ""
    report_capacity: int = 256
    max_table_versions: int = 0
    audit_fsync: bool = False

    def path(self, name: str) -> str:
        return os.path.join(self.data_dir, getattr(self, name))

    @property
    def host_port(self) -> Tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def load(cls, path: str, data_dir: Optional[str] = None) -> "LayerConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        base = os.path.dirname(os.path.abspath(path))
        if data_dir is not None:
            cfg.data_dir = data_dir
        elif not os.path.isabs(cfg.data_dir):
            cfg.data_dir = os.path.normpath(os.path.join(base, cfg.data_dir))
        return cfg
