"""Neuron-wise output-layer defense against targeted label flipping.

Each round the server looks only at the output layer: it measures how much
every output neuron's parameters (incoming weight row plus bias) moved across
the participants, takes the two neurons that moved most as the suspected
source/target classes, clusters the participants' changes on just those two
neurons, drops the outliers from aggregation and keeps a per-client tally that
feeds a permanent blacklist.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .aggregators import UpdateBundle, fedavg
from .clustering import hdbscan
from .data import HazardOrdering
from .nn import ModelParams


@dataclass(frozen=True)
class OutputDelta:
    client_id: int
    rows: np.ndarray  # (L, d_e)


@dataclass
class Blacklist:
    threshold: int = 3
    counts: dict[int, int] = field(default_factory=dict)
    members: set[int] = field(default_factory=set)

    def copy(self) -> "Blacklist":
        return Blacklist(self.threshold, dict(self.counts), set(self.members))

    def __contains__(self, client_id) -> bool:
        return client_id in self.members


@dataclass
class FlareRound:
    """Everything FLARE decided in one round."""

    source: int | None = None
    target: int | None = None
    magnitudes: list[float] = field(default_factory=list)
    ambiguous: bool = False
    outliers: list[int] = field(default_factory=list)
    survivors: list[int] = field(default_factory=list)
    clustering_width: int = 0
    warnings: list[str] = field(default_factory=list)


def output_layer_delta(global_model: ModelParams, local: ModelParams, client_id: int = 0) -> OutputDelta:
    if global_model.shape != local.shape:
        raise ValueError("global and local models have different shapes")
    return OutputDelta(client_id, local.output_neurons() - global_model.output_neurons())


def neuron_magnitudes(deltas: list[OutputDelta]) -> np.ndarray:
    if not deltas:
        raise ValueError("need at least one delta")
    return np.sum([np.linalg.norm(d.rows, axis=1) for d in deltas], axis=0)


def identify_source_target(mags, ordering: HazardOrdering | None = None) -> tuple[int, int, bool]:
    """Top-2 neurons by magnitude; the more hazardous one is the source.

    Returns ``(source, target, ambiguous)``; ``ambiguous`` is set when the
    second-place magnitude is tied with a neuron left out of the top two.
    Ties are broken toward the lower neuron index. Output neuron ``i`` is
    taken to predict hazard class ``i``.
    """
    mags = np.asarray(mags, dtype=np.float64)
    if mags.size < 2:
        raise ValueError("need at least two output neurons")
    if ordering is not None and len(ordering) != mags.size:
        raise ValueError("ordering does not match the number of output neurons")
    order = sorted(range(mags.size), key=lambda i: (-mags[i], i))
    top = order[:2]
    ambiguous = mags.size > 2 and mags[order[1]] == mags[order[2]]
    return max(top), min(top), bool(ambiguous)


def clustering_features(deltas: list[OutputDelta], source: int, target: int) -> np.ndarray:
    """One row per client: its source-neuron change followed by its target-neuron change."""
    return np.stack([np.concatenate([d.rows[source], d.rows[target]]) for d in deltas])


MIN_OUTLIER_SCORE = 0.5


def filter_outliers(
    deltas: list[OutputDelta], source: int, target: int, min_score: float = MIN_OUTLIER_SCORE
) -> tuple[list[int], list[str]]:
    """Client ids flagged as outliers by HDBSCAN on the two suspect neurons.

    A client is an outlier when HDBSCAN labels it noise *and* its GLOSH
    score exceeds ``min_score``, i.e. it detached from the majority cluster at
    more than ``1 / (1 - min_score)`` times the distance at which the
    cluster's densest core collapsed. The score gate keeps the edge of an
    honest-but-heterogeneous majority from being flagged every round.
    """
    if source == target:
        raise ValueError("source and target neurons must differ")
    notes = []
    p = len(deltas)
    if p < 2:
        return [], notes
    res = hdbscan(clustering_features(deltas, source, target), min_cluster_size=p // 2 + 1, min_samples=1)
    if np.all(res.noise):
        notes.append("no majority cluster formed; no client filtered")
        warnings.warn(notes[-1])
        return [], notes
    flagged = res.noise & (res.outlier_scores > min_score)
    return [d.client_id for d, f in zip(deltas, flagged) if f], notes


def update_blacklist(bl: Blacklist, outliers) -> Blacklist:
    bl = bl.copy()
    for cid in outliers:
        bl.counts[cid] = bl.counts.get(cid, 0) + 1
        if bl.counts[cid] > bl.threshold and cid not in bl.members:
            bl.members.add(cid)
    return bl


def flare_aggregate(
    bundle: UpdateBundle, bl: Blacklist, ordering: HazardOrdering | None = None
) -> tuple[ModelParams, Blacklist, FlareRound]:
    listed = [c for c in bundle.client_ids if c in bl]
    if listed:
        raise ValueError(f"blacklisted clients {listed} must not be selected")
    info = FlareRound()
    deltas = [output_layer_delta(bundle.reference, e.params, e.client_id) for e in bundle.entries]
    mags = neuron_magnitudes(deltas)
    info.magnitudes = [float(m) for m in mags]
    info.source, info.target, info.ambiguous = identify_source_target(mags, ordering)
    info.clustering_width = 2 * bundle.reference.shape.neuron_dim
    outliers, notes = filter_outliers(deltas, info.source, info.target)
    info.warnings += notes
    info.outliers = sorted(outliers)
    info.survivors = [c for c in bundle.client_ids if c not in set(outliers)]
    if info.survivors:
        new_model = fedavg(bundle.restrict(info.survivors))
    else:
        info.warnings.append("every client filtered; keeping previous global model")
        warnings.warn(info.warnings[-1])
        new_model = bundle.reference.copy()
    return new_model, update_blacklist(bl, outliers), info
