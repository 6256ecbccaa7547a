"""Reader/writer security labels and conflict labels."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator


def _names(xs: Iterable[str]) -> frozenset[str]:
    if isinstance(xs, str):
        raise TypeError("expected a collection of principal names, got a bare string")
    return frozenset(xs)


@dataclass(frozen=True, order=False)
class Label:
    """A label is a pair of principal sets.

    Information flows towards labels with fewer readers and fewer writers,
    so ``Label(all, all)`` is the bottom of a universe and ``Label({}, {})``
    is its top.
    """

    readers: frozenset[str]
    writers: frozenset[str]

    def __init__(self, readers: Iterable[str] = (), writers: Iterable[str] = ()):
        r, w = _names(readers), _names(writers)
        if not w <= r:
            raise ValueError(f"writers {sorted(w - r)} are not readers")
        object.__setattr__(self, "readers", r)
        object.__setattr__(self, "writers", w)

    @classmethod
    def of(cls, principals: Iterable[str]) -> "Label":
        """Label with readers = writers = principals."""
        p = _names(principals)
        return cls(p, p)

    @classmethod
    def bottom(cls, universe: Iterable[str]) -> "Label":
        return cls.of(universe)

    @classmethod
    def top(cls) -> "Label":
        return cls((), ())

    @classmethod
    def observer(cls, principal: str) -> "Label":
        """What a single principal is allowed to see: anything it may read."""
        return cls({principal}, ())

    def to_json(self) -> dict:
        return {"readers": sorted(self.readers), "writers": sorted(self.writers)}

    @classmethod
    def from_json(cls, d: dict) -> "Label":
        return cls(d["readers"], d["writers"])

    def __str__(self) -> str:
        return f"{{r:{fmt_set(self.readers)},w:{fmt_set(self.writers)}}}"

    def __repr__(self) -> str:
        return f"Label({sorted(self.readers)!r}, {sorted(self.writers)!r})"


def fmt_set(xs: Iterable[str]) -> str:
    return "{" + ",".join(sorted(xs)) + "}"


def flows_to(l1: Label, l2: Label) -> bool:
    return l2.readers <= l1.readers and l2.writers <= l1.writers


def join(l1: Label, l2: Label) -> Label:
    return Label(l1.readers & l2.readers, l1.writers & l2.writers)


def meet(l1: Label, l2: Label) -> Label:
    return Label(l1.readers | l2.readers, l1.writers | l2.writers)


def join_all(labels: Iterable[Label], universe: Iterable[str]) -> Label:
    out = Label.bottom(universe)
    for l in labels:
        out = join(out, l)
    return out


@dataclass(frozen=True)
class ConflictLabel:
    principals: frozenset[str]

    def __init__(self, principals: Iterable[str]):
        object.__setattr__(self, "principals", _names(principals))

    def as_label(self) -> Label:
        # a pc is compared against this coercion: readers = writers = principals
        return Label.of(self.principals)

    def to_json(self) -> list[str]:
        return sorted(self.principals)

    def __str__(self) -> str:
        return fmt_set(self.principals)


def conflict_label_of(field_label: Label) -> ConflictLabel:
    return ConflictLabel(field_label.readers | field_label.writers)


class StageOrder(enum.Enum):
    BEFORE = "Before"
    AFTER = "After"
    SAME = "Same"
    INCOMPARABLE = "Incomparable"


def stage_order(cl1: ConflictLabel, cl2: ConflictLabel) -> StageOrder:
    a, b = cl1.principals, cl2.principals
    if a == b:
        return StageOrder.SAME
    if a > b:
        return StageOrder.BEFORE
    if a < b:
        return StageOrder.AFTER
    return StageOrder.INCOMPARABLE


def all_labels(universe: Iterable[str]) -> Iterator[Label]:
    """Every valid label over a principal universe (3^n of them)."""
    u = sorted(set(universe))
    for choice in itertools.product((0, 1, 2), repeat=len(u)):
        # 0: neither, 1: reader only, 2: reader and writer
        r = [p for p, c in zip(u, choice) if c >= 1]
        w = [p for p, c in zip(u, choice) if c == 2]
        yield Label(r, w)
