"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class PrivacyLayerError(Exception):
    """Base class for all privacy-layer errors."""


class InvalidValue(PrivacyLayerError, ValueError):
    """A measure value is not a finite decimal."""


class InvalidSpec(PrivacyLayerError, ValueError):
    """A range spec or policy parameter is malformed."""


class UnknownPrivilege(InvalidSpec):
    pass


class ValidationFailed(PrivacyLayerError):
    """A policy failed validation; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "validation failed")


class UnknownUser(PrivacyLayerError, LookupError):
    pass


class UnknownRole(PrivacyLayerError, LookupError):
    pass


class UnknownMeasure(PrivacyLayerError, LookupError):
    pass


class UnknownColumn(PrivacyLayerError, LookupError):
    pass


class UnknownTable(PrivacyLayerError, LookupError):
    pass


class UnknownReport(PrivacyLayerError, LookupError):
    pass


class AccessDenied(PrivacyLayerError, PermissionError):
    pass


class InactiveUser(AccessDenied):
    pass


class IdentifierForbidden(AccessDenied):
    pass


class NotAdministrator(PrivacyLayerError, PermissionError):
    pass


class InvalidQuery(PrivacyLayerError, ValueError):
    pass


class SnapOnExactSpec(PrivacyLayerError):
    """Raised by ``snap_filter`` when the spec discloses exact values."""


class StaleTableVersion(PrivacyLayerError, LookupError):
    pass


class HeaderMismatch(PrivacyLayerError, ValueError):
    pass


class DuplicateColumn(PrivacyLayerError, ValueError):
    pass


class CellTypeError(PrivacyLayerError, TypeError):
    """A CSV cell could not be parsed as its declared column type."""

    def __init__(self, row: int, column: str, message: str = ""):
        self.row = row
        self.column = column
        text = f"row {row}, column {column!r}"
        if message:
            text += f": {message}"
        super().__init__(text)


class NoNonZeroWidth(PrivacyLayerError, ValueError):
    pass
