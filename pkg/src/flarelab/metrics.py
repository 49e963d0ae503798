"""Confusion matrices, GAcc / SRec / ASR and the label-distance weighted error."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HALF_E = math.e / 2.0


def weighted_distance(i: int, j: int) -> float:
    """(e/2) ** |i - j|: 1 for a correct prediction, growing with hazard-level gap."""
    return HALF_E ** abs(int(i) - int(j))


def distance_matrix(num_classes: int) -> np.ndarray:
    idx = np.arange(num_classes)
    return HALF_E ** np.abs(idx[:, None] - idx[None, :]).astype(np.float64)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def weighted_matrix(cm) -> np.ndarray:
    cm = np.asarray(cm)
    return distance_matrix(cm.shape[0]) * cm


def weighted_error(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ValueError("confusion matrix must be a non-empty square matrix")
    denom = weighted_matrix(cm).sum()
    if denom == 0:
        raise ValueError("confusion matrix contains no samples")
    return 1.0 - np.trace(cm) / denom


@dataclass(frozen=True)
class MetricsReport:
    gacc: float
    srec: float | None
    asr: float | None
    weighted_error: float
    confusion: np.ndarray
    weighted: np.ndarray

    def as_row(self) -> dict:
        return {
            "gacc": self.gacc,
            "srec": self.srec,
            "asr": self.asr,
            "weighted_error": self.weighted_error,
        }

    def to_json(self) -> dict:
        return {**self.as_row(), "confusion": self.confusion.tolist()}


def standard_metrics(cm, flip) -> MetricsReport:
    """GAcc, SRec and ASR for ``flip`` (anything with ``source``/``target``), plus weighted error.

    SRec and ASR are ``None`` when the test set has no source-class samples.
    """
    source, target = flip.source, flip.target
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix contains no samples")
    row = cm[source]
    n_src = row.sum()
    srec = float(row[source] / n_src) if n_src else None
    asr = float(row[target] / n_src) if n_src else None
    return MetricsReport(
        gacc=float(np.trace(cm) / total),
        srec=srec,
        asr=asr,
        weighted_error=float(weighted_error(cm)),
        confusion=cm.copy(),
        weighted=weighted_matrix(cm),
    )
