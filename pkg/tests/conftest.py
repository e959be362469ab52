from __future__ import annotations

from collections import Counter
from decimal import Decimal

import pytest

from privacy_layer import (
    DataRangeCustomizer,
    DatasetStore,
    MeasurePolicy,
    RoleDef,
    RuleEngine,
    SchemaManifest,
    UserProfile,
    hash_api_key,
    ingest_csv,
)

MEASURE = "annual_income_k"

LADDER_WIDTHS = {"low": 30, "medium_low": 20, "medium": 10, "medium_high": 5, "high": 0}
LADDER_OFFSETS = {"low": 0, "medium_low": 5, "medium": 0, "medium_high": 0, "high": 0}

# user id -> (role id, privilege)
LADDER_USERS = {
    "ext1": ("external", "low"),
    "op1": ("operator", "medium_low"),
    "mgr1": ("managerial", "medium"),
    "kw1": ("knowledge", "medium_high"),
    "cxo1": ("cxo", "high"),
}


def ladder_policy() -> MeasurePolicy:
    return MeasurePolicy.from_widths(MEASURE, LADDER_WIDTHS, LADDER_OFFSETS, unit="$,000")


def ladder_roles():
    return [
        RoleDef(role, priv, {MEASURE}, {"region", "segment"}, may_see_identifiers=(priv == "high"))
        for role, priv in LADDER_USERS.values()
    ]


def ladder_users():
    return [
        UserProfile(uid, uid.upper(), role, hash_api_key(f"token-{uid}"))
        for uid, (role, _) in LADDER_USERS.items()
    ]


MANIFEST = SchemaManifest.from_json(
    {
        "columns": [
            {"name": "customer_id", "kind": "identifier"},
            {"name": "region", "kind": "dimension"},
            {"name": "segment", "kind": "dimension"},
            {"name": MEASURE, "kind": "measure", "unit": "$,000", "granularity": "1"},
        ]
    }
)


def make_csv(rows) -> str:
    lines = ["customer_id,region,segment," + MEASURE]
    for i, (region, segment, value) in enumerate(rows):
        lines.append(f"c{i},{region},{segment},{value}")
    return "\n".join(lines) + "\n"


@pytest.fixture
def manifest():
    return MANIFEST


@pytest.fixture
def engine():
    return RuleEngine(
        roles=ladder_roles(),
        users=ladder_users(),
        policies=[ladder_policy()],
        salt=b"test-salt",
        admin_key_digest=hash_api_key("admin-secret"),
    )


@pytest.fixture
def store():
    return DatasetStore()


@pytest.fixture
def customizer(engine, store):
    return DataRangeCustomizer(engine, store)


@pytest.fixture
def small_table(store):
    rows = [("EU", "retail", 62), ("EU", "corp", 75), ("US", "retail", 88), ("US", "corp", 91)]
    return store.publish(ingest_csv(make_csv(rows), MANIFEST, "cust"))


# -- independent oracles -------------------------------------------------------

def oracle_bucket(value, width, offset):
    """Find the grid cell holding ``value`` by walking the grid, no division."""
    value, width, offset = Decimal(value), Decimal(width), Decimal(offset)
    if width == 0:
        return (value, value)
    lo = offset
    while lo > value:
        lo -= width
    while lo + width <= value:
        lo += width
    return (lo, lo + width)


def oracle_histogram(values, width, offset):
    return dict(Counter(oracle_bucket(v, width, offset) for v in values))


# -- on-disk deployment --------------------------------------------------------

SENTINELS = ["73.37", "61.13", "88.71", "104.29", "77.77"]


@pytest.fixture
def deployment(tmp_path):
    """A data dir with the five reference roles, a policy, and a table ``cust``."""
    import json

    from privacy_layer.layer import PrivacyLayer

    data = tmp_path / "data"
    data.mkdir()
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps(MANIFEST.to_json()))
    csv_path = tmp_path / "cust.csv"
    csv_path.write_text(make_csv([("EU", "retail", 75)]))
    (tmp_path / "layer.toml").write_text(
        f'data_dir = "data"\nlisten = "127.0.0.1:8099"\n'
        f'admin_key_digest = "{hash_api_key("admin-secret").hex()}"\nreport_capacity = 4\n'
    )
    layer = PrivacyLayer.open(str(tmp_path / "layer.toml"))
    admin = layer.engine.local_admin()
    for role in ladder_roles():
        admin.upsert_role(role)
    for user in ladder_users():
        admin.upsert_user(user)
    admin.upsert_policy(ladder_policy())
    layer.ingest("cust", str(csv_path), str(manifest))
    return tmp_path


SENTINEL_MANIFEST = SchemaManifest.from_json(
    {
        "columns": [
            {"name": "customer_id", "kind": "identifier"},
            {"name": "region", "kind": "dimension"},
            {"name": "segment", "kind": "dimension"},
            {"name": MEASURE, "kind": "measure", "unit": "$,000", "granularity": "0.01"},
        ]
    }
)


def add_sentinel_table(layer, tmp_path, table_id="sentinel"):
    """Register a table whose raw incomes are the SENTINELS (cent precision)."""
    import json

    manifest = tmp_path / "sentinel_manifest.json"
    manifest.write_text(json.dumps(SENTINEL_MANIFEST.to_json()))
    csv_path = tmp_path / "sentinel.csv"
    csv_path.write_text(make_csv([("EU", "retail", s) for s in SENTINELS]))
    return layer.ingest(table_id, str(csv_path), str(manifest))
