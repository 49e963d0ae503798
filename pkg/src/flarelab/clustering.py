"""HDBSCAN written against plain numpy.

Pipeline: core distances -> mutual reachability -> minimum spanning tree
(dense Prim) -> single-linkage hierarchy -> condensed tree -> excess-of-mass
cluster selection. Condensation and labelling follow the conventions of the
widely used reference implementation, including its rule for deciding which
points belong to a lone root cluster when ``allow_single_cluster`` is set.

``min_samples`` counts neighbours *excluding* the point itself, so
``min_samples=1`` makes the core distance the nearest-neighbour distance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE = -1


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    outlier_scores: np.ndarray | None = None

    @property
    def noise(self) -> np.ndarray:
        return self.labels == NOISE

    @property
    def noise_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.labels == NOISE)]

    @property
    def num_clusters(self) -> int:
        return len(set(self.labels.tolist()) - {NOISE})


def pairwise_distances(points, metric: str = "euclidean") -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if metric == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    elif metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = x / safe[:, None]
        # zero vectors get similarity 0 with everything
        d = 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def core_distances(dist: np.ndarray, min_samples: int) -> np.ndarray:
    n = dist.shape[0]
    k = min(min_samples, n - 1)
    return np.sort(dist, axis=1)[:, k]


def mutual_reachability(points, min_samples: int = 1, metric: str = "euclidean") -> np.ndarray:
    if min_samples < 1:
        raise ValueError("min_samples must be >= 1")
    dist = pairwise_distances(points, metric)
    if dist.shape[0] == 1:
        return np.zeros((1, 1))
    core = core_distances(dist, min_samples)
    mr = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mr, 0.0)
    return mr


def minimum_spanning_tree(mr: np.ndarray) -> np.ndarray:
    """Dense Prim; returns ``(n-1, 3)`` rows of (a, b, weight) with a < b."""
    n = mr.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.intp)
    in_tree[0] = True
    current = 0
    edges = []
    for _ in range(n - 1):
        cand = ~in_tree
        improve = cand & (mr[current] < best)
        best[improve] = mr[current][improve]
        parent[improve] = current
        masked = np.where(cand, best, np.inf)
        nxt = int(np.argmin(masked))  # lowest index among equal weights
        a, b = sorted((int(parent[nxt]), nxt))
        edges.append((a, b, best[nxt]))
        in_tree[nxt] = True
        current = nxt
    return np.array(edges, dtype=np.float64).reshape(-1, 3)


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Scipy-style linkage rows (left, right, distance, size). New nodes are n, n+1, ..."""
    order = np.lexsort((mst[:, 1], mst[:, 0], mst[:, 2]))
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.intp)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    rows = np.zeros((n - 1, 4))
    for i, e in enumerate(order):
        a, b, w = int(mst[e, 0]), int(mst[e, 1]), mst[e, 2]
        ra, rb = find(a), find(b)
        new = n + i
        rows[i] = (ra, rb, w, size[ra] + size[rb])
        parent[ra] = parent[rb] = new
        size[new] = size[ra] + size[rb]
    return rows


def _bfs_hierarchy(hierarchy: np.ndarray, root: int, n: int) -> list[int]:
    out, queue = [], [root]
    while queue:
        out.extend(queue)
        internal = [x - n for x in queue if x >= n]
        queue = hierarchy[internal, :2].astype(np.intp).ravel().tolist() if internal else []
    return out


def condense_tree(hierarchy: np.ndarray, min_cluster_size: int) -> list[tuple[int, int, float, int]]:
    """(parent, child, lambda, child_size) rows; point ids < n, cluster ids >= n."""
    n = hierarchy.shape[0] + 1
    root = 2 * n - 2
    nodes = _bfs_hierarchy(hierarchy, root, n)
    relabel = {root: n}
    next_label = n + 1
    ignore = set()
    result = []

    def size_of(node):
        return int(hierarchy[node - n, 3]) if node >= n else 1

    for node in nodes:
        if node in ignore or node < n:
            continue
        left, right, dist, _ = hierarchy[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / dist if dist > 0 else np.inf
        lc, rc = size_of(left), size_of(right)
        parent = relabel[node]
        if lc >= min_cluster_size and rc >= min_cluster_size:
            for child, cnt in ((left, lc), (right, rc)):
                relabel[child] = next_label
                result.append((parent, next_label, lam, cnt))
                next_label += 1
            continue
        dropped = []
        if lc < min_cluster_size:
            dropped.append(left)
        else:
            relabel[left] = parent
        if rc < min_cluster_size:
            dropped.append(right)
        else:
            relabel[right] = parent
        for sub in dropped:
            for leaf in _bfs_hierarchy(hierarchy, sub, n):
                if leaf < n:
                    result.append((parent, leaf, lam, 1))
                ignore.add(leaf)
    return result


def _stability(tree: list[tuple[int, int, float, int]], root: int) -> dict[int, float]:
    births = {child: lam for _, child, lam, _ in tree}
    births[root] = 0.0
    stab: dict[int, float] = {}
    for parent, _, lam, cnt in tree:
        gain = 0.0 if lam == births[parent] else (lam - births[parent]) * cnt
        stab[parent] = stab.get(parent, 0.0) + gain
    return stab


def _select_and_label(tree, n: int, allow_single_cluster: bool) -> np.ndarray:
    root = n
    stability = _stability(tree, root)
    nodes = sorted(stability, reverse=True)
    if not allow_single_cluster:
        nodes = nodes[:-1]
    cluster_edges = [(p, c, lam, cnt) for p, c, lam, cnt in tree if cnt > 1]
    children: dict[int, list[int]] = {}
    for p, c, _, _ in cluster_edges:
        children.setdefault(p, []).append(c)
    is_cluster = {c: True for c in nodes}

    def descendants(node):
        out, todo = [], [node]
        while todo:
            out.extend(todo)
            todo = [c for t in todo for c in children.get(t, [])]
        return out

    for node in nodes:
        sub = sum(stability[c] for c in children.get(node, []))
        if sub > stability[node]:
            is_cluster[node] = False
            stability[node] = sub
        else:
            for d in descendants(node):
                if d != node:
                    is_cluster[d] = False

    clusters = sorted(c for c, keep in is_cluster.items() if keep)
    label_of = {c: i for i, c in enumerate(clusters)}

    # union points up through every edge whose child is not a selected cluster
    up = {}
    for p, c, _, _ in tree:
        if c not in label_of:
            up[c] = p

    def top(x):
        while x in up:
            x = up[x]
        return x

    point_lambda = {c: lam for p, c, lam, cnt in tree if c < n}
    labels = np.full(n, NOISE, dtype=np.intp)
    for i in range(n):
        c = top(i)
        if c != root:
            labels[i] = label_of[c]
        elif len(clusters) == 1 and allow_single_cluster:
            threshold = max(lam for p, _, lam, _ in tree if p == root)
            if point_lambda[i] >= threshold:
                labels[i] = label_of[root]
    return labels


def glosh_scores(tree: list[tuple[int, int, float, int]], n: int) -> np.ndarray:
    """GLOSH outlier score per point: 1 - lambda_point / lambda_max of its cluster subtree."""
    deaths: dict[int, float] = {}
    for parent, _, lam, _ in tree:
        deaths[parent] = max(deaths.get(parent, 0.0), lam)
    for parent, child, _, cnt in sorted(tree, key=lambda r: -r[1]):
        if cnt > 1 or child >= n:
            deaths[parent] = max(deaths[parent], deaths.get(child, 0.0))
    scores = np.zeros(n)
    for parent, child, lam, _ in tree:
        if child >= n:
            continue
        top = deaths[parent]
        if top == 0.0 or not np.isfinite(lam):
            scores[child] = 0.0
        elif not np.isfinite(top):
            scores[child] = 1.0
        else:
            scores[child] = (top - lam) / top
    return scores


def hdbscan(
    points,
    min_cluster_size: int,
    min_samples: int = 1,
    metric: str = "euclidean",
    allow_single_cluster: bool = True,
) -> ClusterResult:
    """Cluster rows of ``points``; rows in no selected cluster get label ``NOISE``.

    ``allow_single_cluster`` lets the root of the hierarchy be selected, which
    is what makes a majority-sized ``min_cluster_size`` usable at all. With a
    lone root cluster, points that peeled off before the densest core
    collapsed are labelled noise.
    """
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("points must be a non-empty 2-D array")
    if not np.isfinite(x).all():
        raise ValueError("points must be finite")
    n = x.shape[0]
    if n < min_cluster_size:
        return ClusterResult(np.full(n, NOISE, dtype=np.intp))
    mr = mutual_reachability(x, min_samples, metric)
    hierarchy = single_linkage(minimum_spanning_tree(mr), n)
    tree = condense_tree(hierarchy, min_cluster_size)
    return ClusterResult(_select_and_label(tree, n, allow_single_cluster), glosh_scores(tree, n))
