"""Grid bucketizer with a scikit-learn transformer interface.

>>> b = RangeBucketizer(width=20, offset=5).fit([[75]])
>>> b.transform([[75], [84], [85]]).ravel().tolist()
[65.0, 65.0, 85.0]
"""

from __future__ import annotations

from decimal import Decimal
from typing import List, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InvalidSpec
from .policy import Bucket, RangeSpec, render_decimal, to_decimal


def _as_units(value: Decimal, granularity: Decimal, what: str) -> int:
    units, rem = divmod(value, granularity)
    if rem != 0:
        raise InvalidSpec(f"{what} {render_decimal(value)} is not a multiple of granularity {render_decimal(granularity)}")
    return int(units)


def grid_lo_units(units: np.ndarray, width_units: int, offset_units: int) -> np.ndarray:
    """Lower bucket edge, in granularity steps, for each value in ``units``."""
    units = np.asarray(units, dtype=np.int64)
    if width_units == 0:
        return units.copy()
    return offset_units + np.floor_divide(units - offset_units, width_units) * width_units


class RangeBucketizer(TransformerMixin, BaseEstimator):
    """Map numeric values onto half-open grid buckets ``[lo, lo + width)``.

    Parameters
    ----------
    width : decimal-like
        Bucket width in measure units; ``0`` passes values through unchanged.
    offset : decimal-like
        Grid anchor, ``0 <= offset < width``.
    granularity : decimal-like
        Smallest representable step of the measure. Inputs, width and offset
        must all be whole multiples of it.
    unit : str
        Label carried on emitted :class:`Bucket` objects.

    ``transform`` returns the lower edge of each value's bucket.  The
    ``*_units`` methods work on int64 step counts directly and are exact.
    """

    def __init__(self, width=1, offset=0, granularity=1, unit=""):
        self.width = width
        self.offset = offset
        self.granularity = granularity
        self.unit = unit

    @classmethod
    def from_spec(cls, spec, granularity=None) -> "RangeBucketizer":
        g = granularity if granularity is not None else getattr(spec, "granularity", 1)
        return cls(width=spec.width, offset=spec.offset, granularity=g, unit=getattr(spec, "unit", ""))

    def _validate_params(self):
        width = to_decimal(self.width)
        offset = to_decimal(self.offset)
        g = to_decimal(self.granularity)
        if g <= 0:
            raise InvalidSpec("granularity must be positive")
        problems = RangeSpec(width, offset).problems()
        if problems:
            raise InvalidSpec("; ".join(problems))
        self.width_units_ = _as_units(width, g, "width")
        self.offset_units_ = _as_units(offset, g, "offset")
        self.granularity_ = g

    def fit(self, X=None, y=None):
        self._validate_params()
        if X is not None:
            X = check_array(X, ensure_2d=False, ensure_all_finite=True, dtype="numeric", ensure_min_samples=0)
            self.n_features_in_ = 1 if X.ndim == 1 else X.shape[1]
        return self

    def to_units(self, X) -> np.ndarray:
        """Convert numeric input to int64 granularity steps, rejecting off-grid values."""
        check_is_fitted(self, "width_units_")
        X = check_array(X, ensure_2d=False, ensure_all_finite=True, dtype="numeric", ensure_min_samples=0)
        if X.dtype.kind in "iu" and self.granularity_ == 1:
            return X.astype(np.int64)
        scaled = np.asarray(X, dtype=np.float64) / float(self.granularity_)
        units = np.rint(scaled)
        if not np.allclose(scaled, units, rtol=0, atol=1e-6):
            raise ValueError("input values are not multiples of the granularity")
        return units.astype(np.int64)

    def transform_units(self, units) -> np.ndarray:
        check_is_fitted(self, "width_units_")
        return grid_lo_units(units, self.width_units_, self.offset_units_)

    def transform(self, X):
        lo = self.transform_units(self.to_units(X))
        return lo.astype(np.float64) * float(self.granularity_)

    def count_units(self, units) -> List[Tuple[Bucket, int]]:
        """Non-empty buckets sorted by lower edge, with their occurrence counts."""
        lo = self.transform_units(np.asarray(units, dtype=np.int64).ravel())
        if lo.size == 0:
            return []
        edges, counts = np.unique(lo, return_counts=True)
        return [(self.bucket_from_units(int(e)), int(c)) for e, c in zip(edges, counts)]

    def histogram(self, X) -> List[Tuple[Bucket, int]]:
        return self.count_units(self.to_units(X))

    def bucket_from_units(self, lo_units: int) -> Bucket:
        g = self.granularity_
        lo = Decimal(lo_units) * g
        return Bucket(lo, lo + Decimal(self.width_units_) * g, self.unit)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "width_units_")
        if input_features is None:
            n = getattr(self, "n_features_in_", 1)
            input_features = [f"x{i}" for i in range(n)]
        return np.asarray([f"{name}_bucket_lo" for name in input_features], dtype=object)
