import hashlib
import json
from decimal import Decimal

import pytest

from privacy_layer import (
    Filter,
    MeasurePolicy,
    QueryDescriptor,
    RoleDef,
    ingest_csv,
    snap_filter,
    to_canonical_json,
    utility_report,
)
from privacy_layer.errors import (
    AccessDenied,
    IdentifierForbidden,
    InvalidQuery,
    NoNonZeroWidth,
    SnapOnExactSpec,
    StaleTableVersion,
    UnknownColumn,
    UnknownUser,
)
from privacy_layer.policy import PrivilegeLevel, ResolvedSpec

from conftest import MANIFEST, MEASURE, make_csv, oracle_bucket, oracle_histogram

D = Decimal


def _q(**kw):
    return QueryDescriptor(table_id=kw.pop("table_id", "cust"), measure_id=MEASURE, **kw)


def _hist(pds):
    return {(b.lo, b.hi): c for b, c in pds.buckets}


def _spec(width, offset=0):
    return ResolvedSpec(MEASURE, D(width), D(offset), PrivilegeLevel.LOW, "u")


# -- personalize ---------------------------------------------------------------

def test_single_row_external(customizer, store):
    t = store.publish(ingest_csv(make_csv([("EU", "retail", 75)]), MANIFEST, "cust"))
    pds = customizer.personalize(t, _q(), "ext1")
    assert [(str(b), c) for b, c in pds.buckets] == [("60-90", 1)]
    assert pds.total == 1


def test_four_incomes_match_oracle(customizer, small_table):
    pds = customizer.personalize(small_table, _q(), "ext1")
    assert _hist(pds) == oracle_histogram([62, 75, 88, 91], 30, 0)
    assert _hist(pds) == {(D(60), D(90)): 3, (D(90), D(120)): 1}
    assert pds.total == 4


def test_empty_table(customizer, store):
    t = store.publish(ingest_csv(make_csv([]), MANIFEST, "cust"))
    pds = customizer.personalize(t, _q(), "ext1")
    assert pds.buckets == () and pds.total == 0


def test_cxo_records_exact(customizer, small_table):
    pds = customizer.personalize(small_table, _q(mode="records"), "cxo1")
    assert [r[MEASURE] for r in pds.records] == ["62", "75", "88", "91"]


def test_records_masked_for_external(customizer, small_table):
    pds = customizer.personalize(small_table, _q(mode="records"), "ext1")
    assert [r[MEASURE] for r in pds.records] == ["60-90", "60-90", "60-90", "90-120"]
    assert set(pds.records[0]) == {"region", "segment", MEASURE}


def test_records_identifier_forbidden(customizer, small_table, engine):
    q = _q(mode="records", requested_columns=("customer_id", MEASURE))
    with pytest.raises(IdentifierForbidden):
        customizer.personalize(small_table, q, "mgr1")
    assert engine.audit.entries()[-1].outcome == "deny"
    pds = customizer.personalize(small_table, q, "cxo1")
    assert pds.records[0] == {"customer_id": "c0", MEASURE: "62"}


def test_group_by(customizer, small_table):
    pds = customizer.personalize(small_table, _q(group_by="region"), "mgr1")
    groups = {g: {(b.lo, b.hi): c for b, c in h} for g, h in pds.groups}
    assert groups == {
        "EU": oracle_histogram([62, 75], 10, 0),
        "US": oracle_histogram([88, 91], 10, 0),
    }
    doc = pds.to_dict()
    assert doc["group_by"] == "region" and [g["total"] for g in doc["groups"]] == [2, 2]


def test_group_by_must_be_dimension(customizer, small_table):
    with pytest.raises(InvalidQuery):
        customizer.personalize(small_table, _q(group_by=MEASURE), "mgr1")
    with pytest.raises(InvalidQuery):
        customizer.personalize(small_table, _q(group_by="customer_id"), "cxo1")


def test_dimension_filter(customizer, small_table):
    pds = customizer.personalize(small_table, _q(filters=[Filter("region", "eq", "US")]), "ext1")
    assert _hist(pds) == oracle_histogram([88, 91], 30, 0)


def test_unknown_column_and_user(customizer, small_table):
    with pytest.raises(UnknownColumn):
        customizer.personalize(small_table, _q(filters=[Filter("planet", "eq", "x")]), "ext1")
    with pytest.raises(UnknownUser):
        customizer.personalize(small_table, _q(), "ghost")


def test_access_denied_propagates(customizer, small_table, engine):
    engine.local_admin().upsert_role(RoleDef("external", "low", set(), set()))
    with pytest.raises(AccessDenied):
        customizer.personalize(small_table, _q(), "ext1")


def test_measure_filter_snapped_to_grid(customizer, small_table):
    # ge 80 on a width-30 grid snaps to 60, so every bucket is whole
    pds = customizer.personalize(small_table, _q(filters=[Filter(MEASURE, "ge", 80)]), "ext1")
    assert pds.total == 4
    # the CXO sees exact thresholds
    pds = customizer.personalize(small_table, _q(filters=[Filter(MEASURE, "ge", 80)]), "cxo1")
    assert pds.total == 2


def test_raw_data_untouched(customizer, small_table):
    before = small_table.digest
    for user in ("ext1", "op1", "mgr1", "kw1", "cxo1"):
        customizer.personalize(small_table, _q(mode="records", group_by="region"), user)
    recomputed = hashlib.sha256("\n".join(small_table.canonical_lines()).encode()).hexdigest()
    assert recomputed == before


# -- snap_filter ---------------------------------------------------------------

@pytest.mark.parametrize(
    "op,operand,width,offset,expected",
    [("ge", 72, 10, 0, 70), ("ge", 70, 10, 0, 70), ("lt", 83, 20, 5, 65)],
)
def test_snap_filter_examples(op, operand, width, offset, expected):
    snapped = snap_filter(Filter(MEASURE, op, operand), _spec(width, offset))
    assert snapped == Filter(MEASURE, op, expected)
    assert snapped.operand == D(oracle_bucket(operand, width, offset)[0])
    assert snap_filter(snapped, _spec(width, offset)) == snapped


def test_snap_filter_exact_spec():
    with pytest.raises(SnapOnExactSpec):
        snap_filter(Filter(MEASURE, "ge", 72), _spec(0))


# -- redistribute / refresh ----------------------------------------------------

def test_redistribute_operator_to_manager(customizer, small_table):
    op = customizer.personalize(small_table, _q(), "op1")
    assert _hist(op) == oracle_histogram([62, 75, 88, 91], 20, 5)
    mgr = customizer.redistribute(op, "mgr1")
    assert mgr.resolved.width == 10 and mgr.table_version == op.table_version
    assert _hist(mgr) == oracle_histogram([62, 75, 88, 91], 10, 0)


def test_redistribute_to_self_identical(customizer, small_table):
    op = customizer.personalize(small_table, _q(filters=[Filter(MEASURE, "ge", 70)]), "op1")
    again = customizer.redistribute(op, "op1")
    assert again == op
    assert to_canonical_json(again) == to_canonical_json(op)


def test_redistribute_resnaps_from_original_operand(customizer, small_table):
    # ge 72: operator grid snaps to 65 (keeps 75, 88, 91); manager snaps to 70
    op = customizer.personalize(small_table, _q(filters=[Filter(MEASURE, "ge", 72)]), "op1")
    assert op.total == 3
    assert op.descriptor.filters[0].operand == D(72)
    cxo = customizer.redistribute(op, "cxo1")
    assert _hist(cxo) == {(D(75), D(75)): 1, (D(88), D(88)): 1, (D(91), D(91)): 1}


def test_redistribute_to_cxo_exact(customizer, small_table):
    op = customizer.personalize(small_table, _q(), "op1")
    cxo = customizer.redistribute(op, "cxo1")
    assert _hist(cxo) == {(D(v), D(v)): 1 for v in (62, 75, 88, 91)}


def test_redistribute_stale(engine, small_table):
    from privacy_layer import DataRangeCustomizer, DatasetStore

    store = DatasetStore(max_versions=1)
    cz = DataRangeCustomizer(engine, store)
    store.publish(small_table)
    pds = cz.personalize(small_table, _q(), "op1")
    store.append("cust", make_csv([("EU", "retail", 10)]))
    with pytest.raises(StaleTableVersion):
        cz.redistribute(pds, "mgr1")


def test_refresh_after_append(customizer, store, small_table):
    pds = customizer.personalize(small_table, _q(), "ext1")
    latest = store.append("cust", make_csv([("EU", "retail", 75)]))
    fresh = customizer.refresh(pds, "ext1", latest)
    assert fresh.table_version == 2
    assert _hist(fresh)[(D(60), D(90))] == _hist(pds)[(D(60), D(90))] + 1


def test_refresh_no_new_data(customizer, small_table):
    pds = customizer.personalize(small_table, _q(), "ext1")
    again = customizer.refresh(pds, "ext1")
    assert again == pds
    assert customizer.refresh(again, "ext1") == again


def test_refresh_after_role_change(customizer, small_table, engine):
    pds = customizer.personalize(small_table, _q(), "op1")
    engine.local_admin().set_role("op1", "managerial")
    fresh = customizer.refresh(pds, "op1")
    assert fresh.resolved.width == 10
    assert _hist(fresh) == oracle_histogram([62, 75, 88, 91], 10, 0)


def test_refresh_other_user_denied(customizer, small_table):
    pds = customizer.personalize(small_table, _q(), "op1")
    with pytest.raises(AccessDenied):
        customizer.refresh(pds, "mgr1")


# -- canonical JSON ------------------------------------------------------------

def test_canonical_json_shape(customizer, small_table):
    pds = customizer.personalize(small_table, _q(), "ext1")
    assert to_canonical_json(pds) == (
        '{"measure":"annual_income_k","unit":"$,000","width":"30","table_version":1,"total":4,'
        '"buckets":[{"range":"60-90","lo":"60","hi":"90","count":3},'
        '{"range":"90-120","lo":"90","hi":"120","count":1}]}'
    )


def test_descriptor_round_trip():
    q = _q(filters=[Filter(MEASURE, "ge", "72.5"), Filter("region", "eq", "EU")], group_by="region", mode="records",
           requested_columns=("region", MEASURE))
    assert QueryDescriptor.from_json(json.loads(json.dumps(q.to_json()))) == q
    assert QueryDescriptor.from_json(q.to_json()).digest() == q.digest()
    with pytest.raises(InvalidQuery):
        QueryDescriptor.from_json({"measure_id": MEASURE})


# -- utility_report ------------------------------------------------------------

def _policy(widths):
    return MeasurePolicy.from_widths(MEASURE, widths, unit="$,000")


def test_utility_reference_level_zero(store):
    t = ingest_csv(make_csv([("EU", "r", v) for v in (62, 75, 88, 91, 3, 140)]), MANIFEST)
    report = utility_report(t, MEASURE, _policy({"low": 30, "medium_low": 20, "medium": 10, "medium_high": 5, "high": 0}))
    assert report[PrivilegeLevel.MEDIUM_HIGH].chi_square == 0
    assert PrivilegeLevel.HIGH not in report
    assert report[PrivilegeLevel.LOW].bucket_count == len(oracle_histogram([62, 75, 88, 91, 3, 140], 30, 0))


def test_utility_single_value_hand_computed():
    # 10 rows at 75; reference width 5; width 30 spreads 10 over six cells of 10/6:
    # (10 - 10/6)^2/(10/6) + 5 * 10/6 = 250/6 + 50/6 = 50
    t = ingest_csv(make_csv([("EU", "r", 75)] * 10), MANIFEST)
    report = utility_report(t, MEASURE, _policy({"low": 30, "medium_low": 30, "medium": 30, "medium_high": 5, "high": 0}))
    assert report[PrivilegeLevel.LOW].chi_square == pytest.approx(50.0, abs=1e-9)
    assert report[PrivilegeLevel.MEDIUM_HIGH].chi_square == 0


def test_utility_non_nesting_overlap():
    # width 20 offset 5 against reference 10: bucket [65,85) covers half of [60,70), [70,80), half of [80,90)
    t = ingest_csv(make_csv([("EU", "r", 75)] * 4), MANIFEST)
    pol = MeasurePolicy.from_widths(MEASURE, {"low": 20, "medium_low": 20, "medium": 10, "medium_high": 10, "high": 0},
                                    {"low": 5, "medium_low": 5})
    report = utility_report(t, MEASURE, pol)
    # E = {60: 1, 70: 2, 80: 1}; O = {70: 4}
    assert report[PrivilegeLevel.LOW].chi_square == pytest.approx(1 + 2 + 1, abs=1e-9)


def test_utility_empty_table():
    t = ingest_csv(make_csv([]), MANIFEST)
    report = utility_report(t, MEASURE, _policy({"low": 30, "medium_low": 20, "medium": 10, "medium_high": 5, "high": 0}))
    assert all(r.chi_square == 0 and r.bucket_count == 0 for r in report.values())


def test_utility_requires_nonzero_width():
    t = ingest_csv(make_csv([]), MANIFEST)
    with pytest.raises(NoNonZeroWidth):
        utility_report(t, MEASURE, _policy({lvl.key: 0 for lvl in PrivilegeLevel}))
