"""Datasets, hazard orderings, synthetic data, Dirichlet partitioning and CSV input."""
from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class HazardOrdering:
    """Class names sorted by ascending danger; index ``i`` is class ``l_{i+1}``."""

    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.class_names)
        object.__setattr__(self, "class_names", names)
        if len({n.lower() for n in names}) != len(names):
            raise ValueError(f"class names must be unique (case-insensitive): {names}")
        if len(names) < 1:
            raise ValueError("ordering needs at least one class")

    def __len__(self):
        return len(self.class_names)

    def index(self, name: str) -> int:
        key = name.strip().lower()
        for i, n in enumerate(self.class_names):
            if n.lower() == key:
                return i
        raise KeyError(f"unknown class {name!r}; known classes: {list(self.class_names)}")

    @classmethod
    def generic(cls, num_classes: int) -> "HazardOrdering":
        return cls(tuple(f"class{i}" for i in range(num_classes)))


UNEVENNESS = HazardOrdering(("smooth", "slight-uneven", "severe-uneven"))
FRICTION = HazardOrdering(("dry", "wet", "water", "fresh-snow", "melted-snow", "ice"))
MATERIAL = HazardOrdering(("asphalt", "concrete", "mud", "gravel"))
PRESETS = {"unevenness": UNEVENNESS, "friction": FRICTION, "material": MATERIAL}


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ordering: HazardOrdering

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.intp)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DataError(f"features {x.shape} and labels {y.shape} do not line up")
        if y.size and (y.min() < 0 or y.max() >= len(self.ordering)):
            raise DataError(f"labels must lie in [0, {len(self.ordering)})")
        if not np.isfinite(x).all():
            raise DataError("feature rows must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.ordering)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.features[idx], self.labels[idx], self.ordering)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features, labels, self.ordering)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).astype(np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    input_dim: int,
    class_separation: float,
    seed,
    ordering: HazardOrdering | None = None,
) -> Dataset:
    """Unit-variance Gaussian blobs with means on a line, ``class_separation`` apart.

    Class ``i`` is centred at ``i * class_separation`` along a seeded random
    unit direction, so the distance between two class means grows with their
    hazard-index distance and adjacent classes are the most confusable.
    """
    if min(num_classes, samples_per_class, input_dim) < 1:
        raise ValueError("num_classes, samples_per_class and input_dim must be >= 1")
    if class_separation < 0:
        raise ValueError("class_separation must be >= 0")
    ordering = ordering or HazardOrdering.generic(num_classes)
    if len(ordering) != num_classes:
        raise ValueError("ordering length must equal num_classes")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=input_dim)
    direction /= np.linalg.norm(direction)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    means = np.outer(labels * class_separation, direction)
    features = means + rng.normal(size=(labels.size, input_dim))
    return Dataset(features, labels, ordering)


def dirichlet_partition(data: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``data`` over clients with per-class shares drawn from Dir(alpha)."""
    if len(data) == 0:
        raise DataError("cannot partition an empty dataset")
    rng = np.random.default_rng(spec.seed)
    k = spec.num_clients
    owners: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(k, spec.alpha))
        cuts = (np.cumsum(shares)[:-1] * idx.size).astype(np.intp)
        for client, part in enumerate(np.split(idx, cuts)):
            owners[client].append(part)
    parts = [data.subset(np.sort(np.concatenate(o))) for o in owners]
    empty = sum(1 for p in parts if len(p) == 0)
    if empty:
        warnings.warn(f"{empty} of {k} clients received no samples")
    return parts


def load_csv(path, label_column: str, ordering: HazardOrdering) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty, expected a header row") from None
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header {header}")
        label_pos = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_pos]
        rows, labels = [], []
        # row numbers count the header as row 1
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}")
            try:
                labels.append(ordering.index(row[label_pos]))
            except KeyError:
                raise DataError(
                    f"{path}: row {rownum}: unknown label {row[label_pos]!r}, "
                    f"expected one of {list(ordering.class_names)}"
                ) from None
            vals = []
            for i in feature_cols:
                try:
                    vals.append(float(row[i]))
                except ValueError:
                    raise DataError(
                        f"{path}: row {rownum}, column {header[i]!r}: non-numeric value {row[i]!r}"
                    ) from None
            rows.append(vals)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_cols))
    return Dataset(features, np.array(labels, dtype=np.intp), ordering)
