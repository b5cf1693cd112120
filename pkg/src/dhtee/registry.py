"""Attribute records and the cross-scheme equivalence partition.

Attributes are numbered densely from 0 in registration order. Equivalence is
kept as a union-find forest; the forest shape depends on the merge order and
on path compression, so anything that must be byte-identical across
validators goes through :meth:`AttributeRegistry.snapshot`, which reports
each attribute's class by its smallest member.
"""
from __future__ import annotations

from typing import Iterable, Optional, Sequence

from .codec import record


class DuplicateAttribute(ValueError):
    pass


class UnknownAttribute(KeyError):
    pass


@record
class AttributeRecord:
    id: int
    scheme: str
    label: str

    @property
    def qualified(self) -> str:
        return f"{self.scheme}/{self.label}"


@record
class RequirementList:
    required: tuple[int, ...] = ()
    target_device: Optional[str] = None


@record
class SatisfactionResult:
    satisfied: bool
    witnesses: tuple[tuple[int, int], ...]
    missing: tuple[int, ...]

    def witness_map(self) -> dict[int, int]:
        return dict(self.witnesses)


@record
class RegistrySnapshot:
    attributes: tuple[AttributeRecord, ...]
    class_of: tuple[int, ...]


class AttributeRegistry:

    def __init__(self):
        self._records: list[AttributeRecord] = []
        self._by_label: dict[tuple[str, str], int] = {}
        self._parent: list[int] = []
        self._rank: list[int] = []

    def __len__(self):
        return len(self._records)

    def copy(self) -> "AttributeRegistry":
        other = AttributeRegistry()
        other._records = list(self._records)
        other._by_label = dict(self._by_label)
        other._parent = list(self._parent)
        other._rank = list(self._rank)
        return other

    def register_attribute(self, scheme: str, label: str) -> int:
        key = (scheme, label)
        if key in self._by_label:
            raise DuplicateAttribute(f"{scheme}/{label} already registered")
        new_id = len(self._records)
        self._records.append(AttributeRecord(new_id, scheme, label))
        self._by_label[key] = new_id
        self._parent.append(new_id)
        self._rank.append(0)
        return new_id

    def _check(self, a: int) -> None:
        if not (isinstance(a, int) and 0 <= a < len(self._records)):
            raise UnknownAttribute(a)

    def find(self, a: int) -> int:
        self._check(a)
        parent = self._parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def declare_equivalence(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self._rank[ra] < self._rank[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        if self._rank[ra] == self._rank[rb]:
            self._rank[ra] += 1

    def same_class(self, a: int, b: int) -> bool:
        return self.find(a) == self.find(b)

    def satisfies(self, lst, reported: Iterable[int]) -> SatisfactionResult:
        """Every required attribute needs a reported attribute in its class.

        ``lst`` is a RequirementList or a plain sequence of ids. The witness
        for a requirement is the lowest matching reported id.
        """
        required = lst.required if isinstance(lst, RequirementList) else tuple(lst)
        best: dict[int, int] = {}
        for r in reported:
            root = self.find(r)
            if root not in best or r < best[root]:
                best[root] = r
        witnesses, missing = {}, set()
        for req in required:
            match = best.get(self.find(req))
            if match is None:
                missing.add(req)
            else:
                witnesses[req] = match
        return SatisfactionResult(
            not missing, tuple(sorted(witnesses.items())), tuple(sorted(missing))
        )

    def has(self, scheme: str, label: str) -> bool:
        return (scheme, label) in self._by_label

    def lookup(self, scheme: str, label: str) -> int:
        try:
            return self._by_label[(scheme, label)]
        except KeyError:
            raise UnknownAttribute(f"{scheme}/{label}") from None

    def lookup_qualified(self, name: str) -> int:
        scheme, _, label = name.partition("/")
        return self.lookup(scheme, label)

    def get(self, a: int) -> AttributeRecord:
        self._check(a)
        return self._records[a]

    def records(self) -> Sequence[AttributeRecord]:
        return tuple(self._records)

    def class_members(self, a: int) -> list[int]:
        root = self.find(a)
        return [i for i in range(len(self._records)) if self.find(i) == root]

    def snapshot(self) -> RegistrySnapshot:
        smallest: dict[int, int] = {}
        for i in range(len(self._records)):
            smallest.setdefault(self.find(i), i)
        return RegistrySnapshot(
            tuple(self._records),
            tuple(smallest[self.find(i)] for i in range(len(self._records))),
        )
