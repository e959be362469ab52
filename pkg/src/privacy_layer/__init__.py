"""Role-aware range desensitization for tabular data.

Sensitive measures are served as grid-aligned ranges whose width depends
on the requester's privilege; raw tables are never modified.
"""

from .audit import AuditEntry, AuditLog
from .bucketizer import RangeBucketizer
from .customizer import (
    DataRangeCustomizer,
    PersonalizedDataSet,
    QueryDescriptor,
    snap_filter,
    to_canonical_json,
    utility_report,
)
from .errors import (
    AccessDenied,
    CellTypeError,
    DuplicateColumn,
    HeaderMismatch,
    IdentifierForbidden,
    InactiveUser,
    InvalidQuery,
    InvalidSpec,
    InvalidValue,
    NoNonZeroWidth,
    NotAdministrator,
    PrivacyLayerError,
    SnapOnExactSpec,
    StaleTableVersion,
    UnknownColumn,
    UnknownMeasure,
    UnknownPrivilege,
    UnknownReport,
    UnknownRole,
    UnknownTable,
    UnknownUser,
    ValidationFailed,
)
from .policy import (
    Bucket,
    MeasurePolicy,
    PrivilegeLevel,
    RangeSpec,
    ResolvedSpec,
    ValidationResult,
    bucket_for,
    format_bucket,
    seeded_offset,
    validate_policy,
)
from .rules import RoleDef, RuleEngine, UserProfile, hash_api_key
from .store import (
    ColumnDef,
    DatasetStore,
    Filter,
    SchemaManifest,
    TableVersion,
    append_rows,
    ingest_csv,
    scan,
    snapshot_digest,
)

__version__ = "0.1.0"

__all__ = [
    "AccessDenied",
    "AuditEntry",
    "AuditLog",
    "Bucket",
    "CellTypeError",
    "ColumnDef",
    "DataRangeCustomizer",
    "DatasetStore",
    "DuplicateColumn",
    "Filter",
    "HeaderMismatch",
    "IdentifierForbidden",
    "InactiveUser",
    "InvalidQuery",
    "InvalidSpec",
    "InvalidValue",
    "MeasurePolicy",
    "NoNonZeroWidth",
    "NotAdministrator",
    "PersonalizedDataSet",
    "PrivacyLayerError",
    "PrivilegeLevel",
    "QueryDescriptor",
    "RangeBucketizer",
    "RangeSpec",
    "ResolvedSpec",
    "RoleDef",
    "RuleEngine",
    "SchemaManifest",
    "SnapOnExactSpec",
    "StaleTableVersion",
    "TableVersion",
    "UnknownColumn",
    "UnknownMeasure",
    "UnknownPrivilege",
    "UnknownReport",
    "UnknownRole",
    "UnknownTable",
    "UnknownUser",
    "UserProfile",
    "ValidationFailed",
    "ValidationResult",
    "append_rows",
    "bucket_for",
    "format_bucket",
    "hash_api_key",
    "ingest_csv",
    "scan",
    "seeded_offset",
    "snap_filter",
    "snapshot_digest",
    "to_canonical_json",
    "utility_report",
    "validate_policy",
]
