"""Class-frequency-balanced weights for the counting loss.

Four schemes map a count class to a weight on its counting-loss term:

* ``constant``: ``lambda_0`` for every class.
* ``norm``: ``(1 - n_class / n_total) * lambda_0``.
* ``modal``: ``(n_modal / n_class) * lambda_0``.
* ``log``: ``((sigma_class - sigma_min) / sigma_max + 1) * lambda_0`` with
  ``sigma = log2(log2(n_total / n_class))``.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .captions import COUNTS
from .frequencies import ClassFrequencyTable
from .validation import check_count, check_counts

SCHEMES = ("constant", "norm", "modal", "log")


class ZeroFrequencyError(ValueError):
    """A frequency-ratio weight was requested for a class with no samples."""


@dataclass(frozen=True)
class LambdaScheme:
    kind: str = "constant"
    lambda_0: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown lambda scheme {self.kind!r}; expected one of {SCHEMES}")
        # lambda_0 == 0 switches the counting term off
        if not self.lambda_0 >= 0:
            raise ValueError(f"lambda_0 must be non-negative, got {self.lambda_0}")


@dataclass(frozen=True)
class SigmaTable:
    sigma: Mapping[int, float]
    sigma_min: float
    sigma_max: float
    clamped: frozenset = frozenset()


def lambda_norm(count: int, table: ClassFrequencyTable, lambda_0: float = 1.0) -> float:
    check_count(count)
    return (1.0 - table[count] / table.n_total) * lambda_0


def lambda_modal(count: int, table: ClassFrequencyTable, lambda_0: float = 1.0) -> float:
    check_count(count)
    if table[count] == 0:
        raise ZeroFrequencyError(f"class {count} has no samples; modal weight is unbounded")
    return table.n_modal / table[count] * lambda_0


def _raw_sigma(count: int, table: ClassFrequencyTable) -> tuple[float, bool]:
    ratio = table.n_total / table[count]
    # log2(log2(r)) is <= 0 or undefined for r <= 2
    if ratio <= 2.0:
        return 0.0, True
    return math.log2(math.log2(ratio)), False


def sigma(count: int, table: ClassFrequencyTable) -> float:
    """Double-log inverse frequency; clamped to 0 where ``n_total / n_class <= 2``."""
    check_count(count)
    if table[count] == 0:
        raise ZeroFrequencyError(f"class {count} has no samples; sigma is undefined")
    return _raw_sigma(count, table)[0]


def sigma_table(table: ClassFrequencyTable) -> SigmaTable:
    """Sigma for every class with samples; empty classes are left out."""
    values, clamped = {}, set()
    for c in COUNTS:
        if table[c] == 0:
            continue
        values[c], was_clamped = _raw_sigma(c, table)
        if was_clamped:
            clamped.add(c)
    return SigmaTable(
        MappingProxyType(values), min(values.values()), max(values.values()), frozenset(clamped)
    )


def lambda_log(count: int, table: ClassFrequencyTable, lambda_0: float = 1.0) -> float:
    check_count(count)
    if table[count] == 0:
        raise ZeroFrequencyError(f"class {count} has no samples; sigma is undefined")
    st = sigma_table(table)
    if st.sigma_max == 0:
        return lambda_0
    return ((st.sigma[count] - st.sigma_min) / st.sigma_max + 1.0) * lambda_0


def lambda_constant(count: int, table: ClassFrequencyTable, lambda_0: float = 1.0) -> float:
    check_count(count)
    return lambda_0


_DISPATCH = {
    "constant": lambda_constant,
    "norm": lambda_norm,
    "modal": lambda_modal,
    "log": lambda_log,
}


def lambda_for(scheme: LambdaScheme, count: int, table: ClassFrequencyTable) -> float:
    return _DISPATCH[scheme.kind](count, table, scheme.lambda_0)


@dataclass(frozen=True)
class LambdaTable:
    """Frozen per-class weights, computed once per training run.

    Classes without samples get the largest weight among populated classes
    under ``modal`` and ``log``; they are listed in ``flags``.
    """

    scheme: LambdaScheme
    values: Mapping[int, float]
    flags: Mapping[str, list] = field(default_factory=dict)

    @classmethod
    def build(cls, scheme: LambdaScheme, table: ClassFrequencyTable) -> LambdaTable:
        flags: dict[str, list] = {}
        values: dict[int, float] = {}
        missing = [c for c in COUNTS if table[c] == 0]
        for c in COUNTS:
            if c in missing and scheme.kind in ("modal", "log"):
                continue
            values[c] = lambda_for(scheme, c, table)
        if scheme.kind in ("modal", "log") and missing:
            fill = max(values.values()) if values else scheme.lambda_0
            values.update({c: fill for c in missing})
            flags["zero_frequency"] = missing
        if scheme.kind == "log":
            st = sigma_table(table)
            if st.clamped:
                flags["sigma_clamped"] = sorted(st.clamped)
            if st.sigma_max == 0:
                flags["constant_fallback"] = True
        return cls(scheme, MappingProxyType(dict(sorted(values.items()))), flags)

    def __getitem__(self, count: int) -> float:
        return self.values[count]

    def lookup(self, counts) -> np.ndarray:
        return np.array([self.values[int(c)] for c in counts], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.kind,
            "lambda_0": self.scheme.lambda_0,
            "values": {str(c): v for c, v in self.values.items()},
            "flags": dict(self.flags),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> LambdaTable:
        return cls(
            LambdaScheme(data["scheme"], float(data["lambda_0"])),
            MappingProxyType({int(c): float(v) for c, v in data["values"].items()}),
            dict(data.get("flags", {})),
        )


class LambdaWeighter(TransformerMixin, BaseEstimator):
    """Learn per-count loss weights from class frequencies.

    ``fit`` takes the counts of a counting set; ``transform`` maps counts to
    their weights.

    >>> w = LambdaWeighter(scheme="modal").fit([2, 2, 2, 2, 3])
    >>> w.transform([2, 3]).tolist()
    [1.0, 4.0]
    """

    def __init__(self, scheme="constant", lambda_0=1.0):
        self.scheme = scheme
        self.lambda_0 = lambda_0

    def fit(self, X, y=None):
        counts = check_counts(X)
        self.frequencies_ = ClassFrequencyTable.from_counts(counts)
        self.table_ = LambdaTable.build(LambdaScheme(self.scheme, self.lambda_0), self.frequencies_)
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        return self.table_.lookup(check_counts(X))
