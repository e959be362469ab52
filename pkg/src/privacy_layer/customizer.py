"""Data range customizer: builds personalized data sets from raw table versions.

Reports carry only their query recipe (:class:`QueryDescriptor`) and the
table version they were computed from.  Redistribution and refresh always
recompute from raw rows rather than reshaping another viewer's buckets.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .audit import utc_now
from .bucketizer import RangeBucketizer, grid_lo_units
from .errors import (
    AccessDenied,
    InvalidQuery,
    NoNonZeroWidth,
    SnapOnExactSpec,
    StaleTableVersion,
)
from .policy import (
    Bucket,
    MeasurePolicy,
    PrivilegeLevel,
    ResolvedSpec,
    bucket_for,
    format_bucket,
    render_decimal,
)
from .rules import RuleEngine
from .store import DatasetStore, Filter, TableVersion, filter_mask

MODES = ("histogram", "records")

Histogram = Tuple[Tuple[Bucket, int], ...]


@dataclass(frozen=True)
class QueryDescriptor:
    table_id: str
    measure_id: str
    filters: Tuple[Filter, ...] = ()
    group_by: Optional[str] = None
    mode: str = "histogram"
    requested_columns: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(self.filters))
        if self.requested_columns is not None:
            object.__setattr__(self, "requested_columns", tuple(self.requested_columns))
        if self.mode not in MODES:
            raise InvalidQuery(f"unknown mode {self.mode!r}")

    def to_json(self) -> dict:
        out = {
            "table_id": self.table_id,
            "measure_id": self.measure_id,
            "filters": [f.to_json() for f in self.filters],
            "group_by": self.group_by,
            "mode": self.mode,
        }
        if self.requested_columns is not None:
            out["requested_columns"] = list(self.requested_columns)
        return out

    @classmethod
    def from_json(cls, d: Mapping) -> "QueryDescriptor":
        try:
            cols = d.get("requested_columns")
            return cls(
                table_id=d["table_id"],
                measure_id=d.get("measure_id") or d["measure"],
                filters=tuple(Filter.from_json(f) for f in d.get("filters") or ()),
                group_by=d.get("group_by"),
                mode=d.get("mode", "histogram"),
                requested_columns=tuple(cols) if cols is not None else None,
            )
        except (KeyError, TypeError) as exc:
            raise InvalidQuery(f"malformed query descriptor: {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PersonalizedDataSet:
    descriptor: QueryDescriptor
    table_version: int
    resolved: ResolvedSpec
    buckets: Histogram
    total: int
    generated_at: str = field(default_factory=utc_now, compare=False)
    groups: Optional[Tuple[Tuple[str, Histogram], ...]] = None
    records: Optional[Tuple[Mapping[str, str], ...]] = None

    def counts(self) -> Dict[Bucket, int]:
        return {b: c for b, c in self.buckets}

    def to_dict(self) -> dict:
        out = {
            "measure": self.resolved.measure_id,
            "unit": self.resolved.unit,
            "width": render_decimal(self.resolved.width),
            "table_version": self.table_version,
            "total": self.total,
            "buckets": _buckets_json(self.buckets),
        }
        if self.groups is not None:
            out["group_by"] = self.descriptor.group_by
            out["groups"] = [
                {"group": g, "total": sum(c for _, c in hist), "buckets": _buckets_json(hist)}
                for g, hist in self.groups
            ]
        if self.records is not None:
            out["records"] = [dict(r) for r in self.records]
        return out


def _buckets_json(hist: Histogram) -> list:
    return [
        {
            "range": format_bucket(b),
            "lo": render_decimal(b.lo),
            "hi": render_decimal(b.hi),
            "count": c,
        }
        for b, c in hist
    ]


def to_canonical_json(pds: PersonalizedDataSet) -> str:
    """Canonical rendering shared by the HTTP service and the CLI."""
    return json.dumps(pds.to_dict(), separators=(",", ":"), ensure_ascii=False)


def snap_filter(f: Filter, spec) -> Filter:
    """Move a measure threshold down to the lower edge of its bucket.

    Raises :class:`SnapOnExactSpec` when ``spec`` has width 0; callers pass
    the filter through unchanged in that case.
    """
    if f.op not in ("ge", "lt"):
        raise InvalidQuery(f"only ge/lt measure filters can be snapped, got {f.op!r}")
    if spec.width == 0:
        raise SnapOnExactSpec("exact spec needs no snapping")
    return Filter(f.column, f.op, bucket_for(f.operand, spec).lo)


@dataclass(frozen=True)
class UtilityRow:
    bucket_count: int
    width: Decimal
    chi_square: float


def _bucketizer(spec: ResolvedSpec, table: TableVersion) -> RangeBucketizer:
    col = table.manifest.column(spec.measure_id)
    return RangeBucketizer.from_spec(spec, granularity=col.granularity).fit()


class DataRangeCustomizer:
    """Turns table versions into personalized data sets for resolved requesters."""

    def __init__(self, engine: RuleEngine, store: Optional[DatasetStore] = None):
        self.engine = engine
        self.store = store if store is not None else DatasetStore()

    # -- query validation ------------------------------------------------------

    def _plan(self, table: TableVersion, q: QueryDescriptor, user_id: str):
        """Check ``q`` against the manifest; return (dimensions, identifiers, columns)."""
        manifest = table.manifest
        measure = manifest.column(q.measure_id)
        if not measure.is_measure:
            raise InvalidQuery(f"{q.measure_id!r} is not a measure column")
        dims, idents = set(), False
        if q.group_by is not None:
            if manifest.column(q.group_by).kind != "dimension":
                raise InvalidQuery(f"group_by column {q.group_by!r} must be a dimension")
            dims.add(q.group_by)
        for f in q.filters:
            col = manifest.column(f.column)
            if col.is_measure:
                if col.name != q.measure_id:
                    raise InvalidQuery("measure filters must target the queried measure")
                if f.op == "eq":
                    raise InvalidQuery(f"measure {col.name!r} supports only ge/lt filters")
            else:
                if f.op != "eq":
                    raise InvalidQuery(f"column {col.name!r} supports only eq filters")
                if col.kind == "identifier":
                    idents = True
                else:
                    dims.add(col.name)
        columns: Tuple[str, ...] = ()
        if q.mode == "records":
            if q.requested_columns is None:
                allowed = self.engine.role_of(user_id).allowed_dimensions
                columns = tuple(
                    c.name for c in manifest.columns
                    if c.name == q.measure_id or (c.kind == "dimension" and c.name in allowed)
                )
            else:
                columns = q.requested_columns
                for name in columns:
                    col = manifest.column(name)
                    if col.is_measure and name != q.measure_id:
                        raise InvalidQuery("records may include only the queried measure")
                    if col.kind == "identifier":
                        idents = True
                    elif col.kind == "dimension":
                        dims.add(name)
        return sorted(dims), idents, columns

    # -- operations ------------------------------------------------------------

    def personalize(self, table: TableVersion, q: QueryDescriptor, user_id: str) -> PersonalizedDataSet:
        if q.table_id != table.table_id:
            raise InvalidQuery(f"descriptor targets {q.table_id!r}, got table {table.table_id!r}")
        dims, idents, columns = self._plan(table, q, user_id)
        spec = self.engine.resolve(
            user_id, q.measure_id, dimensions=dims, identifiers=idents, query_digest=q.digest()
        )
        return self._render(table, q, spec, columns)

    def _render(self, table, q, spec, columns) -> PersonalizedDataSet:
        filters = []
        for f in q.filters:
            if f.column == q.measure_id:
                try:
                    f = snap_filter(f, spec)
                except SnapOnExactSpec:
                    pass
            filters.append(f)
        mask = filter_mask(table, filters)
        rows = np.flatnonzero(mask)
        bz = _bucketizer(spec, table)
        units = table.measure_units(q.measure_id)[rows]
        buckets = tuple(bz.count_units(units))

        groups = None
        if q.group_by is not None:
            keys = table.columns[q.group_by][rows]
            grouped = []
            for key in sorted(set(keys.tolist())):
                grouped.append((key, tuple(bz.count_units(units[keys == key]))))
            groups = tuple(grouped)

        records = None
        if q.mode == "records":
            lo = bz.transform_units(units)
            out = []
            for i, row in enumerate(rows.tolist()):
                rec = {}
                for name in columns:
                    if name == q.measure_id:
                        rec[name] = format_bucket(bz.bucket_from_units(int(lo[i])))
                    else:
                        rec[name] = table.columns[name][row]
                out.append(rec)
            records = tuple(out)

        return PersonalizedDataSet(
            descriptor=q,
            table_version=table.version,
            resolved=spec,
            buckets=buckets,
            total=int(rows.size),
            groups=groups,
            records=records,
        )

    def query(self, q: QueryDescriptor, user_id: str) -> PersonalizedDataSet:
        """Personalize against the latest version of ``q.table_id``."""
        return self.personalize(self.store.latest(q.table_id), q, user_id)

    def redistribute(self, pds: PersonalizedDataSet, viewer_user_id: str) -> PersonalizedDataSet:
        """Re-run ``pds``'s query for another viewer on the same table version."""
        table = self.store.get(pds.descriptor.table_id, pds.table_version)
        return self.personalize(table, pds.descriptor, viewer_user_id)

    def refresh(
        self, pds: PersonalizedDataSet, user_id: str, latest: Optional[TableVersion] = None
    ) -> PersonalizedDataSet:
        """Re-run ``pds``'s query on ``latest`` (default: the newest stored version)."""
        if user_id != pds.resolved.resolved_for:
            raise AccessDenied("only the original requester may refresh a report")
        if latest is None:
            latest = self.store.latest(pds.descriptor.table_id)
        if latest.version < pds.table_version:
            raise StaleTableVersion(
                f"version {latest.version} is older than the report's version {pds.table_version}"
            )
        return self.personalize(latest, pds.descriptor, user_id)


def utility_report(
    table: TableVersion, measure_id: str, policy: MeasurePolicy
) -> Dict[PrivilegeLevel, UtilityRow]:
    """Chi-square of each level's bucketing against the finest non-zero grid.

    Observed counts are taken on the reference grid (finest width, offset 0).
    Expected counts spread each coarse bucket's count uniformly over the
    reference cells it overlaps, proportional to overlap length.  User-seeded
    levels are evaluated at offset 0.
    """
    col = table.manifest.column(measure_id)
    if not col.is_measure:
        raise InvalidQuery(f"{measure_id!r} is not a measure column")
    g = col.granularity
    widths = [s.width for s in policy.per_privilege.values() if s.width > 0]
    if not widths:
        raise NoNonZeroWidth(f"policy {policy.measure_id!r} has no non-zero width")
    ref = int(min(widths) / g)
    units = table.measure_units(measure_id)

    observed: Dict[int, int] = {}
    if units.size:
        edges, counts = np.unique(grid_lo_units(units, ref, 0), return_counts=True)
        observed = dict(zip(edges.tolist(), counts.tolist()))

    out = {}
    for level in PrivilegeLevel:
        spec = policy.per_privilege.get(level)
        if spec is None or spec.width == 0:
            continue
        w = int(spec.width / g)
        off = 0 if spec.user_seeded else int(spec.offset / g)
        coarse: Dict[int, int] = {}
        if units.size:
            edges, counts = np.unique(grid_lo_units(units, w, off), return_counts=True)
            coarse = dict(zip(edges.tolist(), counts.tolist()))
        expected: Dict[int, float] = defaultdict(float)
        for lo, count in coarse.items():
            hi = lo + w
            cell = (lo // ref) * ref
            while cell < hi:
                overlap = min(cell + ref, hi) - max(cell, lo)
                if overlap > 0:
                    expected[cell] += count * overlap / w
                cell += ref
        chi = 0.0
        for cell, e in expected.items():
            if e > 0:
                chi += (observed.get(cell, 0) - e) ** 2 / e
        out[level] = UtilityRow(bucket_count=len(coarse), width=spec.width, chi_square=chi)
    return out
