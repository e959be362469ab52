"""Immutable, versioned, in-memory columnar tables ingested from CSV.

Measure columns are held as ``int64`` counts of their granularity step
(``75`` at granularity ``1`` is stored as ``75``; ``75.25`` at ``0.25`` as
``301``), which keeps bucket arithmetic and digests exact.  All other
columns are held as canonical strings.

Digest format (SHA-256 over UTF-8, lines joined with ``\\n``)::

    pds-table-v1
    rows=<row_count>
    column=<name>|<kind>|<value_type>|<unit>|<granularity>
    <value>            # one line per row, column-major
    ...

Measure values are rendered as plain decimals with trailing zeros dropped;
string values are JSON string literals.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import threading
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from functools import cached_property
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CellTypeError,
    DuplicateColumn,
    HeaderMismatch,
    InvalidQuery,
    InvalidSpec,
    StaleTableVersion,
    UnknownColumn,
    UnknownTable,
)
from .policy import floor_div, render_decimal, to_decimal

KINDS = ("measure", "dimension", "identifier")
VALUE_TYPES = ("decimal", "string")
FILTER_OPS = ("eq", "ge", "lt")
_INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class ColumnDef:
    name: str
    kind: str
    value_type: str = "string"
    unit: Optional[str] = None
    granularity: Optional[Decimal] = None

    @property
    def is_measure(self) -> bool:
        return self.kind == "measure"

    def to_json(self) -> dict:
        out: Dict[str, Any] = {"name": self.name, "kind": self.kind, "value_type": self.value_type}
        if self.unit is not None:
            out["unit"] = self.unit
        if self.granularity is not None:
            out["granularity"] = render_decimal(self.granularity)
        return out


@dataclass(frozen=True)
class SchemaManifest:
    columns: tuple

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        seen = set()
        for col in self.columns:
            if col.name in seen:
                raise DuplicateColumn(f"duplicate column {col.name!r}")
            seen.add(col.name)
            if col.kind not in KINDS:
                raise InvalidSpec(f"column {col.name!r}: unknown kind {col.kind!r}")
            if col.value_type not in VALUE_TYPES:
                raise InvalidSpec(f"column {col.name!r}: unknown value_type {col.value_type!r}")
            if col.is_measure:
                if col.value_type != "decimal":
                    raise InvalidSpec(f"measure {col.name!r} must be decimal")
                if col.unit is None or col.granularity is None:
                    raise InvalidSpec(f"measure {col.name!r} needs unit and granularity")
                if col.granularity <= 0:
                    raise InvalidSpec(f"measure {col.name!r}: granularity must be positive")

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> ColumnDef:
        for col in self.columns:
            if col.name == name:
                return col
        raise UnknownColumn(f"unknown column {name!r}")

    def of_kind(self, kind: str) -> List[ColumnDef]:
        return [c for c in self.columns if c.kind == kind]

    @classmethod
    def from_json(cls, data) -> "SchemaManifest":
        if isinstance(data, str):
            data = json.loads(data)
        cols = data["columns"] if isinstance(data, dict) else data
        out = []
        for c in cols:
            gran = c.get("granularity")
            out.append(
                ColumnDef(
                    name=c["name"],
                    kind=c["kind"],
                    value_type=c.get("value_type", "decimal" if c["kind"] == "measure" else "string"),
                    unit=c.get("unit"),
                    granularity=to_decimal(gran) if gran is not None else None,
                )
            )
        return cls(tuple(out))

    def to_json(self) -> dict:
        return {"columns": [c.to_json() for c in self.columns]}


@dataclass(frozen=True)
class Filter:
    """Row predicate: ``eq`` on dimension/identifier columns, ``ge``/``lt`` on measures."""

    column: str
    op: str
    operand: Any

    def __post_init__(self):
        if self.op not in FILTER_OPS:
            raise InvalidQuery(f"unknown filter op {self.op!r}")
        if self.op in ("ge", "lt"):
            object.__setattr__(self, "operand", to_decimal(self.operand))

    def to_json(self) -> dict:
        operand = render_decimal(self.operand) if isinstance(self.operand, Decimal) else self.operand
        return {"column": self.column, "op": self.op, "operand": operand}

    @classmethod
    def from_json(cls, data: Mapping) -> "Filter":
        return cls(data["column"], data["op"], data["operand"])

    @classmethod
    def parse(cls, text: str) -> "Filter":
        """Parse ``COL=V``, ``COL>=V`` or ``COL<V``."""
        for token, op in ((">=", "ge"), ("<", "lt"), ("=", "eq")):
            if token in text:
                col, _, value = text.partition(token)
                if not col.strip():
                    break
                return cls(col.strip(), op, value.strip())
        raise InvalidQuery(f"cannot parse filter {text!r}")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TableVersion:
    table_id: str
    version: int
    manifest: SchemaManifest
    columns: Mapping[str, np.ndarray]
    row_count: int

    @classmethod
    def from_columns(
        cls, table_id: str, manifest: SchemaManifest, columns: Mapping[str, Any], version: int = 1
    ) -> "TableVersion":
        """Build a version from already-typed columns (measures as step counts)."""
        frozen = {}
        lengths = set()
        for col in manifest.columns:
            if col.name not in columns:
                raise UnknownColumn(f"missing column {col.name!r}")
            if col.is_measure:
                arr = np.array(columns[col.name], dtype=np.int64)
            else:
                arr = np.array([str(v) for v in columns[col.name]], dtype=object)
            lengths.add(len(arr))
            frozen[col.name] = _freeze(arr)
        if len(lengths) > 1:
            raise InvalidSpec("columns differ in length")
        rows = lengths.pop() if lengths else 0
        return cls(table_id, version, manifest, MappingProxyType(frozen), rows)

    def measure_units(self, name: str) -> np.ndarray:
        """Raw step counts of a measure column (read-only)."""
        col = self.manifest.column(name)
        if not col.is_measure:
            raise InvalidQuery(f"{name!r} is not a measure")
        return self.columns[name]

    def measure_values(self, name: str) -> List[Decimal]:
        g = self.manifest.column(name).granularity
        return [Decimal(int(u)) * g for u in self.measure_units(name)]

    def value(self, row: int, name: str):
        col = self.manifest.column(name)
        raw = self.columns[name][row]
        return Decimal(int(raw)) * col.granularity if col.is_measure else raw

    def canonical_lines(self) -> Iterable[str]:
        yield "pds-table-v1"
        yield f"rows={self.row_count}"
        for col in self.manifest.columns:
            gran = render_decimal(col.granularity) if col.granularity is not None else ""
            yield f"column={col.name}|{col.kind}|{col.value_type}|{col.unit or ''}|{gran}"
            data = self.columns[col.name]
            if col.is_measure:
                g = col.granularity
                for u in data.tolist():
                    yield render_decimal(Decimal(u) * g)
            else:
                for s in data:
                    yield json.dumps(s, ensure_ascii=False)

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        first = True
        for line in self.canonical_lines():
            if not first:
                h.update(b"\n")
            h.update(line.encode("utf-8"))
            first = False
        return h.hexdigest()


def snapshot_digest(table: TableVersion) -> str:
    return table.digest


def _parse_rows(csv_text: str, manifest: SchemaManifest) -> Dict[str, list]:
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = next(reader)
    except StopIteration:
        raise HeaderMismatch("empty CSV: missing header row") from None
    header = [h.strip() for h in header]
    if header != manifest.names:
        raise HeaderMismatch(f"header {header} does not match manifest {manifest.names}")
    out: Dict[str, list] = {c.name: [] for c in manifest.columns}
    width = len(manifest.columns)
    for record in reader:
        row = reader.line_num
        if not record or (len(record) == 1 and not record[0].strip() and width > 1):
            continue
        if len(record) != width:
            col = manifest.columns[min(len(record), width - 1)].name
            raise CellTypeError(row, col, f"expected {width} fields, got {len(record)}")
        for col, cell in zip(manifest.columns, record):
            out[col.name].append(_parse_cell(cell, col, row))
    return out


def _parse_cell(cell: str, col: ColumnDef, row: int):
    if col.value_type == "string":
        return cell
    text = cell.strip()
    try:
        d = Decimal(text)
    except InvalidOperation:
        raise CellTypeError(row, col.name, f"not a decimal: {cell!r}") from None
    if not d.is_finite():
        raise CellTypeError(row, col.name, f"non-finite value: {cell!r}")
    if not col.is_measure:
        return render_decimal(d)
    units, rem = divmod(d, col.granularity)
    if rem != 0:
        raise CellTypeError(row, col.name, f"{cell!r} is not a multiple of {col.granularity}")
    units = int(units)
    if abs(units) > _INT64_MAX:
        raise CellTypeError(row, col.name, "value out of range")
    return units


def ingest_csv(csv_text: str, manifest: SchemaManifest, table_id: str = "table") -> TableVersion:
    return TableVersion.from_columns(table_id, manifest, _parse_rows(csv_text, manifest), version=1)


def append_rows(table: TableVersion, csv_text: str) -> TableVersion:
    """New version holding ``table``'s rows followed by the CSV's rows."""
    added = _parse_rows(csv_text, table.manifest)
    merged = {}
    for col in table.manifest.columns:
        old = table.columns[col.name]
        dtype = np.int64 if col.is_measure else object
        merged[col.name] = np.concatenate([old, np.array(added[col.name], dtype=dtype)])
    return TableVersion.from_columns(table.table_id, table.manifest, merged, table.version + 1)


def _ceil_units(operand: Decimal, granularity: Decimal) -> int:
    return int(-floor_div(-operand, granularity))


def filter_mask(table: TableVersion, filters: Sequence[Filter]) -> np.ndarray:
    mask = np.ones(table.row_count, dtype=bool)
    for f in filters:
        col = table.manifest.column(f.column)
        data = table.columns[col.name]
        if col.is_measure:
            if f.op == "eq":
                raise InvalidQuery(f"measure {col.name!r} supports only ge/lt filters")
            bound = _ceil_units(f.operand, col.granularity)
            mask &= (data >= bound) if f.op == "ge" else (data < bound)
        else:
            if f.op != "eq":
                raise InvalidQuery(f"column {col.name!r} supports only eq filters")
            operand = str(f.operand)
            if col.value_type == "decimal":
                operand = render_decimal(to_decimal(operand))
            mask &= data == operand
    return mask


def scan(table: TableVersion, filters: Sequence[Filter] = ()) -> np.ndarray:
    """Indices of rows satisfying every filter, in row order."""
    return np.flatnonzero(filter_mask(table, filters))


class DatasetStore:
    """Registry of table versions; publication of a new version is atomic.

    ``max_versions`` bounds how many versions of each table stay readable;
    older ones are evicted and raise :class:`StaleTableVersion`.
    """

    def __init__(self, max_versions: Optional[int] = None):
        self.max_versions = max_versions
        self._tables: Dict[str, Dict[int, TableVersion]] = {}
        self._lock = threading.Lock()

    def publish(self, table: TableVersion) -> TableVersion:
        with self._lock:
            versions = dict(self._tables.get(table.table_id, {}))
            if versions and table.version <= max(versions):
                raise InvalidSpec(
                    f"version {table.version} of {table.table_id!r} is not newer than {max(versions)}"
                )
            versions[table.version] = table
            if self.max_versions is not None:
                for v in sorted(versions)[: -self.max_versions]:
                    del versions[v]
            self._tables[table.table_id] = versions
        return table

    def ingest(self, table_id: str, csv_text: str, manifest: SchemaManifest) -> TableVersion:
        if table_id in self._tables:
            return self.append(table_id, csv_text)
        return self.publish(ingest_csv(csv_text, manifest, table_id))

    def append(self, table_id: str, csv_text: str) -> TableVersion:
        return self.publish(append_rows(self.latest(table_id), csv_text))

    def latest(self, table_id: str) -> TableVersion:
        versions = self._tables.get(table_id)
        if not versions:
            raise UnknownTable(f"unknown table {table_id!r}")
        return versions[max(versions)]

    def get(self, table_id: str, version: int) -> TableVersion:
        versions = self._tables.get(table_id)
        if not versions:
            raise UnknownTable(f"unknown table {table_id!r}")
        try:
            return versions[version]
        except KeyError:
            raise StaleTableVersion(f"version {version} of {table_id!r} is no longer available") from None

    def table_ids(self) -> List[str]:
        return sorted(self._tables)

    def __contains__(self, table_id: str) -> bool:
        return table_id in self._tables
