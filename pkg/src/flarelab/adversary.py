"""Targeted label flipping: malicious clients relabel the source class as the target class."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, HazardOrdering


@dataclass(frozen=True)
class FlipSpec:
    source: int
    target: int

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("source and target class must differ")
        if self.source < self.target:
            raise ValueError(
                f"source class ({self.source}) must be more hazardous than target ({self.target})"
            )
        if self.target < 0:
            raise ValueError("class indices must be non-negative")

    @classmethod
    def from_names(cls, source: str, target: str, ordering: HazardOrdering) -> "FlipSpec":
        return cls(ordering.index(source), ordering.index(target))


@dataclass(frozen=True)
class ClientState:
    client_id: int
    data: Dataset
    malicious: bool = False
    flip: FlipSpec | None = None
    participation: tuple[int, ...] = field(default=())


@dataclass(frozen=True)
class AdversaryRoster:
    malicious_ids: frozenset[int]
    flip: FlipSpec

    def __post_init__(self):
        object.__setattr__(self, "malicious_ids", frozenset(int(i) for i in self.malicious_ids))


def flip_labels(data: Dataset, flip: FlipSpec) -> Dataset:
    if max(flip.source, flip.target) >= data.num_classes:
        raise ValueError(f"flip {flip} out of range for {data.num_classes} classes")
    labels = np.where(data.labels == flip.source, flip.target, data.labels)
    return data.with_labels(labels)


def apply_roster(clients: list[ClientState], roster: AdversaryRoster) -> list[ClientState]:
    k = len(clients)
    m = len(roster.malicious_ids)
    if 2 * m >= k and m > 0:
        raise ValueError(f"{m} malicious clients out of {k} violates the honest-majority bound M < K/2")
    known = {c.client_id for c in clients}
    unknown = roster.malicious_ids - known
    if unknown:
        raise ValueError(f"roster names unknown client ids {sorted(unknown)}")
    return [
        replace(c, data=flip_labels(c.data, roster.flip), malicious=True, flip=roster.flip)
        if c.client_id in roster.malicious_ids
        else c
        for c in clients
    ]
