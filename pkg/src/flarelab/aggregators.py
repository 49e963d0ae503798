"""Baseline aggregation rules: FedAvg, Krum, trimmed mean, median, FoolsGold, FLAME.

Every rule takes an :class:`UpdateBundle` (the round's submitted local models
plus the global model they started from) and returns the next global model.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .clustering import hdbscan
from .nn import ModelParams


@dataclass(frozen=True)
class UpdateEntry:
    client_id: int
    params: ModelParams
    num_samples: int


@dataclass(frozen=True)
class UpdateBundle:
    round: int
    entries: tuple[UpdateEntry, ...]
    reference: ModelParams

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError("an update bundle needs at least one entry")
        shape = self.reference.shape
        if any(e.params.shape != shape for e in self.entries):
            raise ValueError("all submitted models must share the reference model shape")

    @classmethod
    def build(cls, round_, reference, models, sizes=None, client_ids=None) -> "UpdateBundle":
        ids = range(len(models)) if client_ids is None else client_ids
        sizes = [1] * len(models) if sizes is None else sizes
        return cls(round_, tuple(UpdateEntry(int(c), m, int(n)) for c, m, n in zip(ids, models, sizes, strict=True)), reference)

    def __len__(self):
        return len(self.entries)

    @property
    def client_ids(self) -> list[int]:
        return [e.client_id for e in self.entries]

    def matrix(self) -> np.ndarray:
        return np.stack([e.params.flat for e in self.entries])

    def sizes(self) -> np.ndarray:
        return np.array([e.num_samples for e in self.entries], dtype=np.float64)

    def deltas(self) -> np.ndarray:
        return self.matrix() - self.reference.flat

    def restrict(self, keep_ids) -> "UpdateBundle":
        keep = set(keep_ids)
        return UpdateBundle(self.round, tuple(e for e in self.entries if e.client_id in keep), self.reference)


@dataclass
class ClientHistory:
    """Per-client running sum of output-layer updates (FoolsGold memory)."""

    sums: dict[int, np.ndarray] = field(default_factory=dict)

    def get(self, client_id: int, dim: int) -> np.ndarray:
        return self.sums.get(client_id, np.zeros(dim))

    def copy(self) -> "ClientHistory":
        return ClientHistory({k: v.copy() for k, v in self.sums.items()})


def _weighted_average(matrix: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (weights / weights.sum()) @ matrix


def fedavg(bundle: UpdateBundle) -> ModelParams:
    sizes = bundle.sizes()
    if sizes.sum() <= 0:
        warnings.warn("all clients reported zero samples; using uniform FedAvg weights")
        sizes = np.ones_like(sizes)
    return bundle.reference.with_flat(_weighted_average(bundle.matrix(), sizes))


def krum_scores(matrix: np.ndarray, f: int) -> np.ndarray:
    p = matrix.shape[0]
    diff = matrix[:, None, :] - matrix[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    nearest = p - f - 2
    # drop the zero self-distance, then sum the closest neighbours
    return np.array([np.sort(np.delete(sq[i], i))[:nearest].sum() for i in range(p)])


def krum(bundle: UpdateBundle, f: int) -> ModelParams:
    """Return the single submitted model with the lowest Krum score.

    Score = sum of squared distances to the ``P - f - 2`` nearest other models.
    Equal scores go to the lowest client id.
    """
    p = len(bundle)
    if p < f + 3:
        raise ValueError(f"Krum needs P >= f + 3 (P={p}, f={f}); reduce f")
    scores = krum_scores(bundle.matrix(), f)
    ids = np.array(bundle.client_ids)
    best = min(range(p), key=lambda i: (scores[i], ids[i]))
    return bundle.entries[best].params.copy()


def trimmed_mean(bundle: UpdateBundle, trim_k: int) -> ModelParams:
    p = len(bundle)
    if p <= 2 * trim_k:
        raise ValueError(f"trimmed mean needs P > 2k (P={p}, k={trim_k})")
    values = bundle.matrix()
    if trim_k > 0:
        values = np.sort(values, axis=0)[trim_k:p - trim_k]
    # same reduction as fedavg, so k=0 reproduces uniform fedavg bit for bit
    return bundle.reference.with_flat(_weighted_average(values, np.ones(len(values))))


def median(bundle: UpdateBundle) -> ModelParams:
    return bundle.reference.with_flat(np.median(bundle.matrix(), axis=0))


def foolsgold_weights(features: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Per-client weights in [0, 1] from pairwise cosine similarity of histories."""
    p = features.shape[0]
    if p == 1:
        return np.ones(1)
    norms = np.linalg.norm(features, axis=1)
    denom = np.outer(norms, norms)
    # zero-norm histories get similarity 0; eps only guards the division
    cs = np.where(denom > 0, (features @ features.T) / np.maximum(denom, eps), 0.0)
    cs = np.clip(cs, -1.0, 1.0)
    np.fill_diagonal(cs, 0.0)
    maxcs = cs.max(axis=1)
    # pardoning: shrink similarity to clients that look less sybil-like than you
    for i in range(p):
        for j in range(p):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    wv[wv < eps] = 0.0  # similarity within rounding of 1 counts as identical
    top = wv.max()
    if top == 0:
        return np.zeros(p)
    wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = np.log(wv / (1.0 - wv)) + 0.5
    wv[wv > 1] = 1.0  # includes +inf
    wv[wv < 0] = 0.0  # includes -inf from zero weights
    return wv


def foolsgold(bundle: UpdateBundle, history: ClientHistory) -> tuple[ModelParams, ClientHistory, np.ndarray]:
    """FoolsGold over accumulated output-layer updates.

    Returns the new global model, the updated history and the per-client
    weights. If every weight is zero the reference model is kept.
    """
    out = bundle.reference.output_slice()
    dim = out.stop - out.start
    deltas = bundle.deltas()
    history = history.copy()
    for e, d in zip(bundle.entries, deltas):
        history.sums[e.client_id] = history.get(e.client_id, dim) + d[out]
    features = np.stack([history.sums[c] for c in bundle.client_ids])
    weights = foolsgold_weights(features)
    if weights.sum() == 0:
        warnings.warn("FoolsGold assigned zero weight to every client; keeping the previous model")
        return bundle.reference.copy(), history, weights
    step = _weighted_average(deltas, weights)
    return bundle.reference.with_flat(bundle.reference.flat + step), history, weights


def flame_admitted(bundle: UpdateBundle) -> list[int]:
    """Positions of entries admitted by HDBSCAN over cosine distances between updates."""
    p = len(bundle)
    labels = hdbscan(bundle.deltas(), min_cluster_size=p // 2 + 1, min_samples=1, metric="cosine").labels
    admitted = [i for i in range(p) if labels[i] != -1]
    if not admitted:
        warnings.warn("FLAME found no majority cluster; admitting every update")
        admitted = list(range(p))
    return admitted


def flame(bundle: UpdateBundle, noise_scale: float = 0.0, seed=None) -> ModelParams:
    """Cluster, clip admitted updates to the median update norm, average, add noise.

    Noise is Gaussian with std ``noise_scale * median_norm`` per coordinate;
    ``noise_scale = 0`` keeps the rule deterministic.
    """
    if len(bundle) < 2:
        raise ValueError("FLAME needs at least two updates")
    admitted = flame_admitted(bundle)
    deltas = bundle.deltas()
    norms = np.linalg.norm(deltas, axis=1)
    clip_to = np.median(norms)
    kept = deltas[admitted]
    kept_norms = norms[admitted]
    scale = np.minimum(1.0, clip_to / np.where(kept_norms > 0, kept_norms, 1.0))
    step = (kept * scale[:, None]).mean(axis=0)
    flat = bundle.reference.flat + step
    if noise_scale > 0:
        rng = np.random.default_rng(seed)
        flat = flat + rng.normal(scale=noise_scale * clip_to, size=flat.shape)
    return bundle.reference.with_flat(flat)


def default_krum_f(p: int) -> int:
    # ceil(0.3 P), capped so that P >= f + 3 still holds
    return max(0, min(math.ceil(0.3 * p), p - 3))


def default_trim_k(p: int) -> int:
    return min(math.floor(0.3 * p), (p - 1) // 2)


AGGREGATORS = ("fedavg", "krum", "tmean", "median", "foolsgold", "flame", "flare")
