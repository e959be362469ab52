"""Bucketization math and measure-policy validation.

Everything here is pure: no I/O, no shared state.  Values are handled as
:class:`decimal.Decimal` so bucket boundaries are exact at any granularity.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from enum import IntEnum
from typing import Dict, List, Mapping, Optional, Union

from .errors import InvalidSpec, InvalidValue, UnknownPrivilege

Number = Union[Decimal, int, float, str]

ZERO = Decimal(0)
ONE = Decimal(1)


class PrivilegeLevel(IntEnum):
    LOW = 0
    MEDIUM_LOW = 1
    MEDIUM = 2
    MEDIUM_HIGH = 3
    HIGH = 4

    @property
    def label(self) -> str:
        """Human form, e.g. ``Medium-Low``."""
        return "-".join(part.capitalize() for part in self.name.split("_"))

    @property
    def camel(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))

    @property
    def key(self) -> str:
        """Serialized form used in policy and portfolio files."""
        return self.name.lower()

    @classmethod
    def parse(cls, name: Union[str, int, "PrivilegeLevel"]) -> "PrivilegeLevel":
        if isinstance(name, PrivilegeLevel):
            return name
        if isinstance(name, int) and not isinstance(name, bool):
            try:
                return cls(name)
            except ValueError:
                raise UnknownPrivilege(f"unknown privilege level {name!r}") from None
        if isinstance(name, str):
            folded = name.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
            for level in cls:
                if level.name.lower().replace("_", "") == folded:
                    return level
        raise UnknownPrivilege(f"unknown privilege level {name!r}")


def to_decimal(value: Number) -> Decimal:
    """Convert ``value`` to a finite Decimal or raise :class:`InvalidValue`."""
    if isinstance(value, bool):
        raise InvalidValue(f"not a number: {value!r}")
    try:
        if isinstance(value, float):
            d = Decimal(repr(value))
        else:
            d = Decimal(value)
    except (InvalidOperation, TypeError, ValueError):
        raise InvalidValue(f"not a number: {value!r}") from None
    if not d.is_finite():
        raise InvalidValue(f"non-finite value: {value!r}")
    return d


def render_decimal(value: Decimal) -> str:
    """Plain notation, trailing zeros dropped, no separators (``60``, ``2.5``, ``-10``)."""
    if value == 0:
        return "0"
    return format(value.normalize(), "f")


@dataclass(frozen=True)
class RangeSpec:
    """Width plus offset rule for one privilege level.

    ``user_seeded`` offsets are derived per requester by :func:`seeded_offset`;
    otherwise ``offset`` is used verbatim.
    """

    width: Decimal
    offset: Decimal = ZERO
    user_seeded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "width", to_decimal(self.width))
        object.__setattr__(self, "offset", to_decimal(self.offset))

    @classmethod
    def fixed(cls, width: Number, offset: Number = 0) -> "RangeSpec":
        return cls(to_decimal(width), to_decimal(offset), False)

    @classmethod
    def seeded(cls, width: Number) -> "RangeSpec":
        return cls(to_decimal(width), ZERO, True)

    def problems(self) -> List[str]:
        out = []
        if self.width < 0:
            out.append(f"negative width {render_decimal(self.width)}")
        elif self.width == 0:
            if self.user_seeded:
                out.append("user-seeded offset requires width > 0")
            elif self.offset != 0:
                out.append("offset must be 0 when width is 0")
        elif not self.user_seeded and not (0 <= self.offset < self.width):
            out.append(
                f"offset {render_decimal(self.offset)} outside [0, {render_decimal(self.width)})"
            )
        return out


@dataclass(frozen=True)
class ResolvedSpec:
    """A concrete (width, offset) pair resolved for one requester and measure."""

    measure_id: str
    width: Decimal
    offset: Decimal
    privilege: PrivilegeLevel
    resolved_for: str
    unit: str = ""
    granularity: Decimal = ONE

    @property
    def exact(self) -> bool:
        return self.width == 0


@dataclass(frozen=True)
class Bucket:
    lo: Decimal
    hi: Decimal
    unit: str = ""

    @property
    def width(self) -> Decimal:
        return self.hi - self.lo

    @property
    def exact(self) -> bool:
        return self.hi == self.lo

    def __contains__(self, value) -> bool:
        v = to_decimal(value)
        if self.exact:
            return v == self.lo
        return self.lo <= v < self.hi

    def __str__(self) -> str:
        return format_bucket(self)


@dataclass
class MeasurePolicy:
    measure_id: str
    unit: str
    per_privilege: Dict[PrivilegeLevel, RangeSpec]
    granularity: Decimal = ONE
    salt: bytes = b""

    def __post_init__(self):
        self.granularity = to_decimal(self.granularity)
        self.per_privilege = {
            PrivilegeLevel.parse(k): v for k, v in self.per_privilege.items()
        }

    def spec_for(self, privilege: PrivilegeLevel) -> RangeSpec:
        return self.per_privilege[PrivilegeLevel(privilege)]

    def width(self, privilege: PrivilegeLevel) -> Decimal:
        return self.spec_for(privilege).width

    @classmethod
    def from_widths(
        cls,
        measure_id: str,
        widths: Mapping,
        offsets: Optional[Mapping] = None,
        unit: str = "",
        granularity: Number = 1,
    ) -> "MeasurePolicy":
        """Convenience constructor for fixed-offset policies."""
        offsets = {PrivilegeLevel.parse(k): v for k, v in (offsets or {}).items()}
        per = {}
        for k, w in widths.items():
            level = PrivilegeLevel.parse(k)
            per[level] = RangeSpec.fixed(w, offsets.get(level, 0))
        return cls(measure_id, unit, per, to_decimal(granularity))


@dataclass
class ValidationResult:
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _is_multiple(value: Decimal, step: Decimal) -> bool:
    return step > 0 and value % step == 0


def validate_policy(
    policy: MeasurePolicy, exact_floor: PrivilegeLevel = PrivilegeLevel.HIGH
) -> ValidationResult:
    """Check every structural rule of ``policy``; never raises."""
    result = ValidationResult()
    add = result.violations.append
    if not policy.measure_id:
        add("empty measure_id")
    g = policy.granularity
    if g <= 0:
        add(f"granularity must be positive, got {render_decimal(g)}")

    missing = [lvl for lvl in PrivilegeLevel if lvl not in policy.per_privilege]
    for lvl in missing:
        add(f"missing spec for {lvl.camel}")

    for lvl in PrivilegeLevel:
        spec = policy.per_privilege.get(lvl)
        if spec is None:
            continue
        for problem in spec.problems():
            add(f"{lvl.camel}: {problem}")
        if g > 0 and spec.width > 0:
            if not _is_multiple(spec.width, g):
                add(f"{lvl.camel}: width {render_decimal(spec.width)} not a multiple of granularity")
            if not spec.user_seeded and not _is_multiple(spec.offset, g) and spec.offset != 0:
                add(f"{lvl.camel}: offset {render_decimal(spec.offset)} not a multiple of granularity")
        if spec.width == 0 and lvl < exact_floor:
            add(f"exact disclosure below floor at {lvl.camel}")

    levels = [lvl for lvl in PrivilegeLevel if lvl in policy.per_privilege]
    for i, p in enumerate(levels):
        for q in levels[i + 1:]:
            if policy.per_privilege[p].width < policy.per_privilege[q].width:
                add(f"{p.camel} narrower than {q.camel}")
    return result


def floor_div(x: Decimal, step: Decimal) -> Decimal:
    """Exact floor(x / step) for Decimals."""
    q, r = divmod(x, step)
    if r != 0 and (r < 0) != (step < 0):
        q -= 1
    return q


def bucket_for(value: Number, spec) -> Bucket:
    """The grid bucket of ``spec`` (anything with ``width``/``offset``) holding ``value``."""
    v = to_decimal(value)
    width = to_decimal(spec.width)
    offset = to_decimal(getattr(spec, "offset", ZERO))
    unit = getattr(spec, "unit", "")
    if width < 0:
        raise InvalidSpec(f"negative width {width}")
    if width == 0:
        return Bucket(v, v, unit)
    if not (0 <= offset < width):
        raise InvalidSpec(f"offset {offset} outside [0, {width})")
    lo = offset + floor_div(v - offset, width) * width
    return Bucket(lo, lo + width, unit)


def seeded_offset(
    user_id: str,
    role_id: str,
    privilege: PrivilegeLevel,
    measure_id: str,
    salt: bytes,
    width: Number,
    granularity: Number = 1,
) -> Decimal:
    """Deterministic per-requester grid offset in ``[0, width)``.

    HMAC-SHA256 keyed by ``salt`` over the identity tuple, reduced modulo
    the number of granularity steps in one bucket.
    """
    width = to_decimal(width)
    granularity = to_decimal(granularity)
    if width <= 0:
        raise InvalidSpec("seeded offset requires width > 0")
    if granularity <= 0 or width % granularity != 0:
        raise InvalidSpec("width must be a positive multiple of granularity")
    steps = int(width / granularity)
    message = "\x1f".join(
        [user_id, role_id, PrivilegeLevel.parse(privilege).key, measure_id]
    ).encode("utf-8")
    digest = hmac.new(bytes(salt), message, hashlib.sha256).digest()
    return (int.from_bytes(digest, "big") % steps) * granularity


def format_bucket(bucket: Bucket) -> str:
    if bucket.exact:
        return render_decimal(bucket.lo)
    return f"{render_decimal(bucket.lo)}-{render_decimal(bucket.hi)}"
