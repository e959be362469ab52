"""Rule engine: user portfolio, role definitions, measure policies, audit.

Reads go through an immutable snapshot of the store that administrative
writes replace wholesale, so ``resolve`` never sees a half-applied change.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
import threading
from dataclasses import dataclass, field, replace
from typing import FrozenSet, Iterable, List, Mapping, Optional

from ._fileio import atomic_write_json
from .audit import AuditEntry, AuditLog
from .errors import (
    AccessDenied,
    IdentifierForbidden,
    InactiveUser,
    InvalidSpec,
    NotAdministrator,
    UnknownMeasure,
    UnknownRole,
    UnknownUser,
    ValidationFailed,
)
from .policy import (
    ZERO,
    MeasurePolicy,
    PrivilegeLevel,
    RangeSpec,
    ResolvedSpec,
    render_decimal,
    seeded_offset,
    to_decimal,
    validate_policy,
)

ADMIN_ID = "admin"


def hash_api_key(token: str) -> bytes:
    return hashlib.sha256(token.encode("utf-8")).digest()


@dataclass(frozen=True)
class RoleDef:
    role_id: str
    privilege: PrivilegeLevel
    allowed_measures: FrozenSet[str] = frozenset()
    allowed_dimensions: FrozenSet[str] = frozenset()
    may_see_identifiers: bool = False

    def __post_init__(self):
        object.__setattr__(self, "privilege", PrivilegeLevel.parse(self.privilege))
        object.__setattr__(self, "allowed_measures", frozenset(self.allowed_measures))
        object.__setattr__(self, "allowed_dimensions", frozenset(self.allowed_dimensions))

    def to_json(self) -> dict:
        return {
            "role_id": self.role_id,
            "privilege": self.privilege.key,
            "allowed_measures": sorted(self.allowed_measures),
            "allowed_dimensions": sorted(self.allowed_dimensions),
            "may_see_identifiers": self.may_see_identifiers,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "RoleDef":
        return cls(
            role_id=d["role_id"],
            privilege=PrivilegeLevel.parse(d["privilege"]),
            allowed_measures=frozenset(d.get("allowed_measures", ())),
            allowed_dimensions=frozenset(d.get("allowed_dimensions", ())),
            may_see_identifiers=bool(d.get("may_see_identifiers", False)),
        )


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    display_name: str
    role_id: str
    api_key_digest: bytes = b""
    active: bool = True

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "display_name": self.display_name,
            "role_id": self.role_id,
            "api_key_digest": self.api_key_digest.hex(),
            "active": self.active,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "UserProfile":
        if d.get("api_key_digest"):
            digest = bytes.fromhex(d["api_key_digest"])
        elif d.get("api_key"):
            digest = hash_api_key(d["api_key"])
        else:
            digest = b""
        return cls(
            user_id=d["user_id"],
            display_name=d.get("display_name", d["user_id"]),
            role_id=d["role_id"],
            api_key_digest=digest,
            active=bool(d.get("active", True)),
        )


# -- policy file format --------------------------------------------------------

def range_spec_to_json(spec: RangeSpec) -> dict:
    mode = "user_seeded" if spec.user_seeded else {"fixed": render_decimal(spec.offset)}
    return {"width": render_decimal(spec.width), "offset_mode": mode}


def range_spec_from_json(d: Mapping) -> RangeSpec:
    mode = d.get("offset_mode", {"fixed": "0"})
    if mode == "user_seeded" or (isinstance(mode, Mapping) and "user_seeded" in mode):
        return RangeSpec.seeded(d["width"])
    if isinstance(mode, Mapping) and "fixed" in mode:
        return RangeSpec.fixed(d["width"], mode["fixed"])
    raise InvalidSpec(f"unknown offset_mode {mode!r}")


def policy_to_json(policy: MeasurePolicy) -> dict:
    return {
        "measure_id": policy.measure_id,
        "unit": policy.unit,
        "granularity": render_decimal(policy.granularity),
        "per_privilege": {
            lvl.key: range_spec_to_json(policy.per_privilege[lvl])
            for lvl in PrivilegeLevel
            if lvl in policy.per_privilege
        },
    }


def policy_from_json(d: Mapping, salt: bytes = b"") -> MeasurePolicy:
    return MeasurePolicy(
        measure_id=d["measure_id"],
        unit=d.get("unit", ""),
        per_privilege={
            PrivilegeLevel.parse(k): range_spec_from_json(v) for k, v in d["per_privilege"].items()
        },
        granularity=to_decimal(d.get("granularity", "1")),
        salt=salt,
    )


@dataclass(frozen=True)
class _State:
    roles: Mapping[str, RoleDef] = field(default_factory=dict)
    users: Mapping[str, UserProfile] = field(default_factory=dict)
    policies: Mapping[str, MeasurePolicy] = field(default_factory=dict)
    salt: bytes = b""


class RuleEngine:
    """Resolves (user, measure) requests to range specs and records every decision.

    Parameters
    ----------
    audit : AuditLog, optional
        Defaults to an in-memory log.
    admin_key_digest : bytes, optional
        SHA-256 of the administrator bearer token.
    exact_floor : PrivilegeLevel
        Lowest privilege allowed a width-0 (exact) spec.
    identifier_floor : PrivilegeLevel
        Lowest privilege a role may have and still see identifier columns.
    policies_path, portfolio_path : str, optional
        When set, every administrative change is persisted there.
    """

    def __init__(
        self,
        *,
        roles: Iterable[RoleDef] = (),
        users: Iterable[UserProfile] = (),
        policies: Iterable[MeasurePolicy] = (),
        salt: Optional[bytes] = None,
        audit: Optional[AuditLog] = None,
        admin_key_digest: Optional[bytes] = None,
        exact_floor: PrivilegeLevel = PrivilegeLevel.HIGH,
        identifier_floor: PrivilegeLevel = PrivilegeLevel.HIGH,
        policies_path: Optional[str] = None,
        portfolio_path: Optional[str] = None,
    ):
        self.audit = audit if audit is not None else AuditLog()
        self.admin_key_digest = admin_key_digest
        self.exact_floor = PrivilegeLevel.parse(exact_floor)
        self.identifier_floor = PrivilegeLevel.parse(identifier_floor)
        self.policies_path = policies_path
        self.portfolio_path = portfolio_path
        self._write_lock = threading.Lock()
        salt = secrets.token_bytes(16) if salt is None else bytes(salt)
        roles = {r.role_id: r for r in roles}
        for r in roles.values():
            self._check_role(r)
        users = {u.user_id: u for u in users}
        for u in users.values():
            if u.role_id not in roles:
                raise UnknownRole(f"user {u.user_id!r} references unknown role {u.role_id!r}")
        pols = {}
        for p in policies:
            self._check_policy(p)
            pols[p.measure_id] = replace(p, salt=p.salt or salt)
        self._state = _State(roles, users, pols, salt)

    # -- loading / saving ------------------------------------------------------

    @classmethod
    def load(
        cls,
        policies_path: Optional[str] = None,
        portfolio_path: Optional[str] = None,
        audit_path: Optional[str] = None,
        **kwargs,
    ) -> "RuleEngine":
        salt = None
        policies: List[MeasurePolicy] = []
        if policies_path and os.path.exists(policies_path):
            with open(policies_path, encoding="utf-8") as fh:
                doc = json.load(fh)
            if doc.get("salt_hex"):
                salt = bytes.fromhex(doc["salt_hex"])
            policies = [policy_from_json(m, salt or b"") for m in doc.get("measures", ())]
        roles: List[RoleDef] = []
        users: List[UserProfile] = []
        if portfolio_path and os.path.exists(portfolio_path):
            with open(portfolio_path, encoding="utf-8") as fh:
                doc = json.load(fh)
            roles = [RoleDef.from_json(r) for r in doc.get("roles", ())]
            users = [UserProfile.from_json(u) for u in doc.get("users", ())]
        audit = kwargs.pop("audit", None)
        fsync = kwargs.pop("fsync", False)
        if audit is None:
            audit = AuditLog(audit_path, fsync=fsync)
        engine = cls(
            roles=roles,
            users=users,
            policies=policies,
            salt=salt,
            audit=audit,
            policies_path=policies_path,
            portfolio_path=portfolio_path,
            **kwargs,
        )
        if policies_path and salt is None:
            engine._persist(engine._state)
        return engine

    def policies_document(self, state: Optional[_State] = None) -> dict:
        st = state or self._state
        return {
            "salt_hex": st.salt.hex(),
            "measures": [policy_to_json(p) for _, p in sorted(st.policies.items())],
        }

    def portfolio_document(self, state: Optional[_State] = None) -> dict:
        st = state or self._state
        return {
            "roles": [r.to_json() for _, r in sorted(st.roles.items())],
            "users": [u.to_json() for _, u in sorted(st.users.items())],
        }

    def _persist(self, state: _State) -> None:
        if self.policies_path:
            atomic_write_json(self.policies_path, self.policies_document(state))
        if self.portfolio_path:
            atomic_write_json(self.portfolio_path, self.portfolio_document(state))

    # -- read side -------------------------------------------------------------

    @property
    def salt(self) -> bytes:
        return self._state.salt

    def user(self, user_id: str) -> UserProfile:
        try:
            return self._state.users[user_id]
        except KeyError:
            raise UnknownUser(f"unknown user {user_id!r}") from None

    def role(self, role_id: str) -> RoleDef:
        try:
            return self._state.roles[role_id]
        except KeyError:
            raise UnknownRole(f"unknown role {role_id!r}") from None

    def role_of(self, user_id: str) -> RoleDef:
        return self.role(self.user(user_id).role_id)

    def policy(self, measure_id: str) -> MeasurePolicy:
        try:
            return self._state.policies[measure_id]
        except KeyError:
            raise UnknownMeasure(f"unknown measure {measure_id!r}") from None

    def users(self) -> List[UserProfile]:
        return list(self._state.users.values())

    def roles(self) -> List[RoleDef]:
        return list(self._state.roles.values())

    def policies(self) -> List[MeasurePolicy]:
        return list(self._state.policies.values())

    def is_admin_token(self, token: Optional[str]) -> bool:
        if not token or not self.admin_key_digest:
            return False
        return hmac.compare_digest(hash_api_key(token), self.admin_key_digest)

    def authenticate(self, token: Optional[str]) -> Optional[str]:
        """User id owning ``token``, or None."""
        if not token:
            return None
        digest = hash_api_key(token)
        for user in self._state.users.values():
            if user.api_key_digest and hmac.compare_digest(digest, user.api_key_digest):
                return user.user_id
        return None

    def _spec(self, st: _State, user: UserProfile, role: RoleDef, policy: MeasurePolicy) -> ResolvedSpec:
        spec = policy.spec_for(role.privilege)
        if spec.width == 0:
            offset = ZERO
        elif spec.user_seeded:
            offset = seeded_offset(
                user.user_id,
                role.role_id,
                role.privilege,
                policy.measure_id,
                policy.salt or st.salt,
                spec.width,
                policy.granularity,
            )
        else:
            offset = spec.offset
        return ResolvedSpec(
            measure_id=policy.measure_id,
            width=spec.width,
            offset=offset,
            privilege=role.privilege,
            resolved_for=user.user_id,
            unit=policy.unit,
            granularity=policy.granularity,
        )

    def resolve(
        self,
        user_id: str,
        measure_id: str,
        *,
        dimensions: Iterable[str] = (),
        identifiers: bool = False,
        query_digest: str = "",
    ) -> ResolvedSpec:
        """Resolve the spec for ``measure_id`` as seen by ``user_id``.

        ``dimensions`` and ``identifiers`` name the non-measure columns the
        request touches; they are checked against the role's allow-lists so
        the single audit entry reflects the full decision.
        """
        st = self._state
        user = st.users.get(user_id)
        if user is None:
            raise UnknownUser(f"unknown user {user_id!r}")

        def deny(exc_type, message):
            self.audit.record(user_id, "denied", "deny", [measure_id], query_digest, message)
            raise exc_type(message)

        if not user.active:
            deny(InactiveUser, f"user {user_id!r} is inactive")
        role = st.roles.get(user.role_id)
        if role is None:
            deny(UnknownRole, f"unknown role {user.role_id!r}")
        policy = st.policies.get(measure_id)
        if policy is None:
            deny(UnknownMeasure, f"unknown measure {measure_id!r}")
        if measure_id not in role.allowed_measures:
            deny(AccessDenied, f"role {role.role_id!r} may not access measure {measure_id!r}")
        blocked = sorted(set(dimensions) - role.allowed_dimensions)
        if blocked:
            deny(AccessDenied, f"role {role.role_id!r} may not access dimensions {blocked}")
        if identifiers and not role.may_see_identifiers:
            deny(IdentifierForbidden, f"role {role.role_id!r} may not see identifier columns")
        resolved = self._spec(st, user, role, policy)
        self.audit.record(
            user_id, "query", "allow", [measure_id], query_digest,
            f"width={render_decimal(resolved.width)} privilege={role.privilege.key}",
        )
        return resolved

    def list_audit(self, token: Optional[str], **filters) -> List[AuditEntry]:
        return self.as_admin(token).list_audit(**filters)

    # -- administration --------------------------------------------------------

    def as_admin(self, token: Optional[str]) -> "AdminSession":
        if not self.is_admin_token(token):
            raise NotAdministrator("administrator key required")
        return AdminSession(self)

    def local_admin(self) -> "AdminSession":
        """Administrative session for a trusted local operator (the CLI)."""
        return AdminSession(self)

    def _check_role(self, role: RoleDef) -> None:
        if role.may_see_identifiers and role.privilege < self.identifier_floor:
            raise ValidationFailed(
                [f"role {role.role_id!r}: identifiers require privilege {self.identifier_floor.camel}"]
            )

    def _check_policy(self, policy: MeasurePolicy) -> None:
        result = validate_policy(policy, self.exact_floor)
        if not result.ok:
            raise ValidationFailed(result.violations)

    def _commit(self, new_state: _State, detail: str, measure_ids=(), payload=None) -> None:
        # caller holds _write_lock
        self._persist(new_state)
        self._state = new_state
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
        ).hexdigest()
        self.audit.record(ADMIN_ID, "admin_change", "allow", measure_ids, digest, detail)


class AdminSession:
    """Administrative operations; obtained from :meth:`RuleEngine.as_admin`."""

    def __init__(self, engine: RuleEngine):
        self._engine = engine

    def upsert_role(self, role: RoleDef) -> None:
        eng = self._engine
        eng._check_role(role)
        with eng._write_lock:
            st = eng._state
            roles = dict(st.roles)
            roles[role.role_id] = role
            eng._commit(replace(st, roles=roles), f"upsert_role {role.role_id}", payload=role.to_json())

    def upsert_user(self, profile: UserProfile) -> None:
        eng = self._engine
        with eng._write_lock:
            st = eng._state
            if profile.role_id not in st.roles:
                raise UnknownRole(f"unknown role {profile.role_id!r}")
            users = dict(st.users)
            users[profile.user_id] = profile
            eng._commit(replace(st, users=users), f"upsert_user {profile.user_id}", payload=profile.to_json())

    def set_role(self, user_id: str, role_id: str) -> None:
        eng = self._engine
        with eng._write_lock:
            st = eng._state
            if user_id not in st.users:
                raise UnknownUser(f"unknown user {user_id!r}")
            if role_id not in st.roles:
                raise UnknownRole(f"unknown role {role_id!r}")
            users = dict(st.users)
            users[user_id] = replace(users[user_id], role_id=role_id)
            eng._commit(
                replace(st, users=users), f"set_role {user_id} -> {role_id}",
                payload={"user_id": user_id, "role_id": role_id},
            )

    def set_active(self, user_id: str, active: bool) -> None:
        eng = self._engine
        with eng._write_lock:
            st = eng._state
            if user_id not in st.users:
                raise UnknownUser(f"unknown user {user_id!r}")
            users = dict(st.users)
            users[user_id] = replace(users[user_id], active=active)
            eng._commit(
                replace(st, users=users), f"set_active {user_id} -> {active}",
                payload={"user_id": user_id, "active": active},
            )

    def upsert_policy(self, policy: MeasurePolicy) -> None:
        eng = self._engine
        eng._check_policy(policy)
        with eng._write_lock:
            st = eng._state
            policies = dict(st.policies)
            policies[policy.measure_id] = replace(policy, salt=policy.salt or st.salt)
            eng._commit(
                replace(st, policies=policies), f"upsert_policy {policy.measure_id}",
                [policy.measure_id], policy_to_json(policy),
            )

    def set_salt(self, salt: bytes) -> None:
        eng = self._engine
        with eng._write_lock:
            st = eng._state
            old = st.salt
            policies = {
                k: replace(p, salt=salt if p.salt in (b"", old) else p.salt)
                for k, p in st.policies.items()
            }
            eng._commit(replace(st, policies=policies, salt=bytes(salt)), "set_salt", payload="salt")

    def list_audit(self, user_id=None, since=None, outcome=None) -> List[AuditEntry]:
        return self._engine.audit.query(user_id=user_id, since=since, outcome=outcome)
