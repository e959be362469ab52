"""``pds`` command-line front end.

The CLI trusts the local operator: ``--user`` is taken at face value and
admin commands need no key.  Exit status: 0 ok, 2 access denied, 1 other
errors.
"""

from __future__ import annotations

import json
import sys

import click

from .customizer import QueryDescriptor, to_canonical_json, utility_report
from .errors import AccessDenied, NotAdministrator, PrivacyLayerError, ValidationFailed
from .layer import PrivacyLayer
from .policy import PrivilegeLevel, format_bucket, render_decimal
from .rules import RoleDef, UserProfile, hash_api_key, policy_from_json
from .store import Filter


def _fail(exc: Exception) -> None:
    if isinstance(exc, ValidationFailed):
        click.echo("error: validation failed", err=True)
        for v in exc.violations:
            click.echo(f"  - {v}", err=True)
    else:
        message = str(exc) if not isinstance(exc, KeyError) else exc.args[0]
        click.echo(f"error: {message}", err=True)
    code = 2 if isinstance(exc, (AccessDenied, NotAdministrator)) else 1
    sys.exit(code)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (PrivacyLayerError, OSError, ValueError, KeyError) as exc:
            _fail(exc)


@click.group(cls=_Group)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="layer.toml configuration file.")
@click.option("--data-dir", default=None, help="Directory holding policies, portfolio, audit and catalog.")
@click.pass_context
def main(ctx, config_path, data_dir):
    """Role-aware range desensitization for tabular data."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path
    ctx.obj["data_dir"] = data_dir


def _layer(ctx) -> PrivacyLayer:
    if "layer" not in ctx.obj:
        ctx.obj["layer"] = PrivacyLayer.open(ctx.obj["config"], ctx.obj["data_dir"])
    return ctx.obj["layer"]


@main.command()
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--table", "table_id", required=True)
@click.pass_context
def ingest(ctx, csv_path, manifest, table_id):
    """Load a CSV into a table (appends a new version if the table exists)."""
    table = _layer(ctx).ingest(table_id, csv_path, manifest)
    click.echo(f"{table.table_id} v{table.version}: {table.row_count} rows, digest {table.digest}")


def render_table(pds, display_name: str, role) -> str:
    """Rows in the style of the role/privilege/data/range report."""
    unit = pds.resolved.unit
    header = ["Role", "Privilege level", "Data"]
    if pds.groups is not None:
        header.append(pds.descriptor.group_by)
    header += [f"Range {unit}".strip(), "Count"]
    rows = []
    base = [role.role_id, role.privilege.label, pds.resolved.measure_id]
    if pds.groups is not None:
        for g, hist in pds.groups:
            rows += [base + [g, format_bucket(b), str(c)] for b, c in hist]
    else:
        rows += [base + [format_bucket(b), str(c)] for b, c in pds.buckets]
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + rows]
    lines.append(f"total: {pds.total}  (user {display_name}, table version {pds.table_version})")
    if pds.records is not None:
        lines.append("")
        for rec in pds.records:
            lines.append("  ".join(f"{k}={v}" for k, v in rec.items()))
    return "\n".join(lines)


@main.command()
@click.option("--user", "user_id", required=True)
@click.option("--table", "table_id", required=True)
@click.option("--measure", "measure_id", required=True)
@click.option("--filter", "filters", multiple=True, help="COL=V, COL>=V or COL<V; repeatable.")
@click.option("--group-by", default=None)
@click.option("--records", is_flag=True, help="Emit range-masked rows instead of only a histogram.")
@click.option("--json", "fmt", flag_value="json", help="Canonical JSON output.")
@click.option("--tabular", "fmt", flag_value="table", default=True, help="Tabular output (default).")
@click.pass_context
def query(ctx, user_id, table_id, measure_id, filters, group_by, records, fmt):
    """Run a personalized query as USER."""
    layer = _layer(ctx)
    q = QueryDescriptor(
        table_id=table_id,
        measure_id=measure_id,
        filters=tuple(Filter.parse(f) for f in filters),
        group_by=group_by,
        mode="records" if records else "histogram",
    )
    pds = layer.customizer.query(q, user_id)
    if fmt == "json":
        click.echo(to_canonical_json(pds))
    else:
        user = layer.engine.user(user_id)
        click.echo(render_table(pds, user.display_name, layer.engine.role(user.role_id)))


@main.group()
def admin():
    """Maintain roles, users and measure policies."""


@admin.group("user")
def admin_user():
    """Manage user profiles."""


@admin_user.command("add")
@click.option("--user-id", required=True)
@click.option("--name", "display_name", default=None)
@click.option("--role", "role_id", required=True)
@click.option("--api-key", default=None, help="Bearer token; only its SHA-256 is stored.")
@click.option("--inactive", is_flag=True)
@click.pass_context
def admin_user_add(ctx, user_id, display_name, role_id, api_key, inactive):
    engine = _layer(ctx).engine
    profile = UserProfile(
        user_id=user_id,
        display_name=display_name or user_id,
        role_id=role_id,
        api_key_digest=hash_api_key(api_key) if api_key else b"",
        active=not inactive,
    )
    engine.local_admin().upsert_user(profile)
    click.echo(f"user {user_id} saved")


@admin_user.command("set-role")
@click.option("--user-id", required=True)
@click.option("--role", "role_id", required=True)
@click.pass_context
def admin_user_set_role(ctx, user_id, role_id):
    _layer(ctx).engine.local_admin().set_role(user_id, role_id)
    click.echo(f"user {user_id} now has role {role_id}")


@admin.group("role")
def admin_role():
    """Manage role definitions."""


def _csv_set(value):
    return frozenset(v.strip() for v in (value or "").split(",") if v.strip())


@admin_role.command("add")
@click.option("--role-id", required=True)
@click.option("--privilege", required=True, type=click.Choice([p.label for p in PrivilegeLevel] + [p.key for p in PrivilegeLevel], case_sensitive=False))
@click.option("--measures", default="", help="Comma-separated measure ids.")
@click.option("--dimensions", default="", help="Comma-separated dimension columns.")
@click.option("--identifiers", is_flag=True, help="Allow identifier columns.")
@click.pass_context
def admin_role_add(ctx, role_id, privilege, measures, dimensions, identifiers):
    role = RoleDef(role_id, PrivilegeLevel.parse(privilege), _csv_set(measures), _csv_set(dimensions), identifiers)
    _layer(ctx).engine.local_admin().upsert_role(role)
    click.echo(f"role {role_id} saved")


@admin.group("policy")
def admin_policy():
    """Manage measure policies."""


@admin_policy.command("set")
@click.option("--file", "path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def admin_policy_set(ctx, path):
    """Install one policy object, or every entry of a policies.json ``measures`` list."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    items = doc["measures"] if isinstance(doc, dict) and "measures" in doc else [doc]
    session = _layer(ctx).engine.local_admin()
    for item in items:
        session.upsert_policy(policy_from_json(item))
        click.echo(f"policy {item['measure_id']} saved")


@admin.command("hash-key")
@click.argument("key")
def admin_hash_key(key):
    """Print the SHA-256 digest to store for a bearer token."""
    click.echo(hash_api_key(key).hex())


@main.group()
def audit():
    """Inspect the access history."""


@audit.command("list")
@click.option("--user", "user_id", default=None)
@click.option("--deny-only", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def audit_list(ctx, user_id, deny_only, as_json):
    entries = _layer(ctx).engine.local_admin().list_audit(
        user_id=user_id, outcome="deny" if deny_only else None
    )
    for e in entries:
        if as_json:
            click.echo(json.dumps(e.to_json(), separators=(",", ":")))
        else:
            click.echo(f"{e.timestamp}  {e.user_id:<12} {e.action:<12} {e.outcome:<5} "
                       f"{','.join(e.measure_ids):<20} {e.detail}")


@main.command()
@click.option("--table", "table_id", required=True)
@click.option("--measure", "measure_id", required=True)
@click.pass_context
def utility(ctx, table_id, measure_id):
    """Chi-square of each privilege level's ranges against the finest grid."""
    layer = _layer(ctx)
    table = layer.store.latest(table_id)
    report = utility_report(table, measure_id, layer.engine.policy(measure_id))
    click.echo(f"{'Privilege level':<16} {'Width':>8} {'Buckets':>8} {'Chi-square':>12}")
    for level, row in report.items():
        click.echo(f"{level.label:<16} {render_decimal(row.width):>8} {row.bucket_count:>8} {row.chi_square:>12.4f}")


@main.command()
@click.option("--config", "serve_config", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def serve(ctx, serve_config):
    """Run the HTTP service."""
    from .service import serve as run

    if serve_config:
        ctx.obj["config"] = serve_config
    run(_layer(ctx))


if __name__ == "__main__":  # pragma: no cover
    main()
