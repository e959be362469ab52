import json

import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from privacy_layer.cli import main
from privacy_layer.layer import PrivacyLayer
from privacy_layer.service import create_app

from conftest import MEASURE, SENTINELS, LADDER_WIDTHS, add_sentinel_table, make_csv


@pytest.fixture
def run(deployment):
    runner = CliRunner()

    def _run(*args):
        return runner.invoke(main, ["--config", str(deployment / "layer.toml"), *args])

    return _run


def test_query_table_output(run):
    res = run("query", "--user", "ext1", "--table", "cust", "--measure", MEASURE)
    assert res.exit_code == 0, res.output
    lines = res.output.splitlines()
    assert lines[0].split() == ["Role", "Privilege", "level", "Data", "Range", "$,000", "Count"]
    assert lines[1].split() == ["external", "Low", MEASURE, "60-90", "1"]


def test_query_all_ladder_rows(run):
    got = {}
    for user in ["ext1", "op1", "mgr1", "kw1", "cxo1"]:
        res = run("query", "--user", user, "--table", "cust", "--measure", MEASURE, "--json")
        got[user] = json.loads(res.output)["buckets"][0]["range"]
    assert got == {"ext1": "60-90", "op1": "65-85", "mgr1": "70-80", "kw1": "75-80", "cxo1": "75"}


def test_query_unknown_user(run):
    res = run("query", "--user", "nobody", "--table", "cust", "--measure", MEASURE)
    assert res.exit_code == 1
    assert "unknown user" in res.output


def test_query_denied_exit_2(run):
    assert run("admin", "role", "add", "--role-id", "external", "--privilege", "Low").exit_code == 0
    res = run("query", "--user", "ext1", "--table", "cust", "--measure", MEASURE)
    assert res.exit_code == 2


def test_query_filters_groups_records(run, deployment):
    extra = deployment / "more.csv"
    extra.write_text(make_csv([("US", "corp", 91), ("US", "retail", 62)]))
    assert run("ingest", "--csv", str(extra), "--manifest", str(deployment / "manifest.json"),
               "--table", "cust").exit_code == 0
    res = run("query", "--user", "mgr1", "--table", "cust", "--measure", MEASURE,
              "--filter", "region=US", "--group-by", "segment", "--json")
    doc = json.loads(res.output)
    assert doc["total"] == 2 and doc["table_version"] == 2
    assert [g["group"] for g in doc["groups"]] == ["corp", "retail"]
    res = run("query", "--user", "ext1", "--table", "cust", "--measure", MEASURE, "--records", f"--filter={MEASURE}>=70")
    assert res.exit_code == 0
    assert f"{MEASURE}=60-90" in res.output


def test_policy_set_non_monotone(run, tmp_path):
    bad = {"measure_id": MEASURE, "unit": "$,000", "granularity": "1", "per_privilege": {
        k: {"width": str(10 if k == "low" else w), "offset_mode": {"fixed": "0"}} for k, w in LADDER_WIDTHS.items()}}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    res = run("admin", "policy", "set", "--file", str(path))
    assert res.exit_code == 1
    assert "Low narrower than MediumLow" in res.output


def test_policy_set_accepts_policies_document(run, tmp_path):
    good = {"salt_hex": "", "measures": [{"measure_id": "visits", "unit": "visits", "per_privilege": {
        k: {"width": str(w)} for k, w in LADDER_WIDTHS.items()}}]}
    path = tmp_path / "good.json"
    path.write_text(json.dumps(good))
    res = run("admin", "policy", "set", "--file", str(path))
    assert res.exit_code == 0 and "policy visits saved" in res.output


def test_user_admin_and_audit(run):
    assert run("admin", "user", "add", "--user-id", "n1", "--role", "external", "--api-key", "k").exit_code == 0
    assert run("admin", "user", "set-role", "--user-id", "n1", "--role", "managerial").exit_code == 0
    res = run("query", "--user", "n1", "--table", "cust", "--measure", MEASURE, "--json")
    assert json.loads(res.output)["width"] == "10"
    res = run("admin", "user", "set-role", "--user-id", "n1", "--role", "ghost")
    assert res.exit_code == 1
    res = run("audit", "list", "--user", "n1", "--json")
    entries = [json.loads(l) for l in res.output.splitlines()]
    assert [e["outcome"] for e in entries] == ["allow"]


def test_audit_deny_only(run):
    run("admin", "role", "add", "--role-id", "knowledge", "--privilege", "Medium-High")
    run("query", "--user", "kw1", "--table", "cust", "--measure", MEASURE)
    run("query", "--user", "op1", "--table", "cust", "--measure", MEASURE)
    res = run("audit", "list", "--deny-only")
    lines = res.output.strip().splitlines()
    assert len(lines) == 1 and "kw1" in lines[0]


def test_utility_command(run):
    res = run("utility", "--table", "cust", "--measure", MEASURE)
    assert res.exit_code == 0
    rows = [l.split() for l in res.output.splitlines()[1:]]
    assert [r[0] for r in rows] == ["Low", "Medium-Low", "Medium", "Medium-High"]
    assert rows[-1][-1] == "0.0000"


def test_hash_key(run):
    res = run("admin", "hash-key", "admin-secret")
    assert res.output.strip() == "16175223c8ddce5ace0493c948569c211b03c4c6bb3d3e484434999448cffe01"


def test_cli_and_service_byte_identical(run, deployment):
    layer = PrivacyLayer.open(str(deployment / "layer.toml"))
    client = TestClient(create_app(layer))
    for user in ["ext1", "op1", "cxo1"]:
        cli = run("query", "--user", user, "--table", "cust", "--measure", MEASURE, "--group-by", "region", "--json")
        http = client.post("/v1/query", json={"table_id": "cust", "measure_id": MEASURE, "group_by": "region"},
                           headers={"Authorization": f"Bearer token-{user}"})
        assert cli.output.rstrip("\n").encode() == http.content


def test_cli_no_sentinel_leaks(run, deployment):
    add_sentinel_table(PrivacyLayer.open(str(deployment / "layer.toml")), deployment)
    for user in ["ext1", "op1", "mgr1", "kw1"]:
        for extra in ([], ["--records"], ["--json"], ["--records", "--json"]):
            res = run("query", "--user", user, "--table", "sentinel", "--measure", MEASURE, *extra)
            assert res.exit_code == 0
            assert not any(s in res.output for s in SENTINELS)
