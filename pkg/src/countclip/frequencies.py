"""Per-count sample frequencies over a counting set."""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

from .captions import COUNTS


@dataclass(frozen=True)
class ClassFrequencyTable:
    n_class: Mapping[int, int]
    n_total: int = field(init=False)

    def __post_init__(self):
        unknown = set(self.n_class) - set(COUNTS)
        if unknown:
            raise ValueError(f"counts outside [2, 10]: {sorted(unknown)}")
        full = {c: int(self.n_class.get(c, 0)) for c in COUNTS}
        if any(v < 0 for v in full.values()):
            raise ValueError("class frequencies must be non-negative")
        total = sum(full.values())
        if total <= 0:
            raise ValueError("frequency table is empty (n_total must be positive)")
        object.__setattr__(self, "n_class", MappingProxyType(full))
        object.__setattr__(self, "n_total", total)

    @classmethod
    def from_counts(cls, counts: Iterable[int]) -> ClassFrequencyTable:
        tally = Counter()
        for c in counts:
            c = int(c)
            if c not in COUNTS:
                raise ValueError(f"count {c} outside [2, 10]")
            tally[c] += 1
        return cls(dict(tally))

    @property
    def n_modal(self) -> int:
        return max(self.n_class.values())

    def __getitem__(self, count: int) -> int:
        return self.n_class[count]

    def scaled(self, factor: int) -> ClassFrequencyTable:
        return ClassFrequencyTable({c: n * factor for c, n in self.n_class.items()})

    def to_dict(self) -> dict:
        return {"n_class": {str(c): n for c, n in self.n_class.items()}, "n_total": self.n_total}

    @classmethod
    def from_dict(cls, data: Mapping) -> ClassFrequencyTable:
        table = cls({int(c): int(n) for c, n in data["n_class"].items()})
        if "n_total" in data and int(data["n_total"]) != table.n_total:
            raise ValueError("n_total does not match the sum of class frequencies")
        return table


def compute_class_frequencies(rows: Iterable[Mapping]) -> ClassFrequencyTable:
    """Tally the ``count`` field of counting-set manifest rows."""
    return ClassFrequencyTable.from_counts(row["count"] for row in rows)
