"""Neighbor graphs, covariance features, Potts segmentation and FPS."""
import heapq
from dataclasses import dataclass

import numpy as np

FEATURE_NAMES = ("linearity", "planarity", "scattering", "verticality")
FEATURE_VERSION = 1
DEGENERATE_FEATURE = np.array([0.0, 0.0, 1.0, 0.0])
VERTICAL = np.array([0.0, 0.0, 1.0])


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError(f"points must be (N, 3) with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError("labels must have one entry per point")
            if len(self.labels) and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.points)

    def with_labels(self, labels):
        return PointCloud(self.points, labels)


@dataclass
class NeighborGraph:
    """k-NN lists plus the symmetrized undirected edge set derived from them.

    ``indices``/``distances`` hold exactly ``k`` directed neighbors per point;
    ``edges`` holds each undirected pair ``(i, j)``, ``i < j``, once.
    """
    indices: np.ndarray
    distances: np.ndarray
    edges: np.ndarray
    edge_lengths: np.ndarray

    @property
    def k(self):
        return self.indices.shape[1]

    @property
    def num_points(self):
        return self.indices.shape[0]

    def adjacency(self):
        """Symmetrized neighbor lists as ``[(j, d_ij), ...]`` per point."""
        adj = [[] for _ in range(self.num_points)]
        for (i, j), d in zip(self.edges.tolist(), self.edge_lengths.tolist()):
            adj[i].append((j, d))
            adj[j].append((i, d))
        for lst in adj:
            lst.sort()
        return adj

    def edge_weights(self):
        """w_ij = 1 / (1 + d_ij / mean edge length)."""
        if len(self.edge_lengths) == 0:
            return np.zeros(0)
        mean = self.edge_lengths.mean()
        if mean == 0:
            return np.ones_like(self.edge_lengths)
        return 1.0 / (1.0 + self.edge_lengths / mean)


def _pairwise_distances(points):
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_knn_graph(cloud, k):
    n = len(cloud)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    dist = _pairwise_distances(cloud.points)
    np.fill_diagonal(dist, np.inf)
    # stable sort keeps the lower index first among equal distances
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    dists = np.take_along_axis(dist, order, axis=1)
    rows = np.repeat(np.arange(n), k)
    cols = order.reshape(-1)
    pairs = np.stack([np.minimum(rows, cols), np.maximum(rows, cols)], axis=1)
    pairs = np.unique(pairs, axis=0)
    lengths = dist[pairs[:, 0], pairs[:, 1]]
    return NeighborGraph(order, dists, pairs, lengths)


def compute_geometric_features(cloud, graph):
    """Per-point (linearity, planarity, scattering, verticality).

    The neighborhood of point i is i itself plus its k nearest neighbors.
    """
    nbhd = np.concatenate([np.arange(len(cloud))[:, None], graph.indices], axis=1)
    pts = cloud.points[nbhd]
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / pts.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    l1, l2, l3 = evals[:, 0], evals[:, 1], evals[:, 2]
    normal = evecs[:, :, 0]
    feats = np.tile(DEGENERATE_FEATURE, (len(cloud), 1))
    ok = l1 > 1e-18
    feats[ok, 0] = (l1[ok] - l2[ok]) / l1[ok]
    feats[ok, 1] = (l2[ok] - l3[ok]) / l1[ok]
    feats[ok, 2] = l3[ok] / l1[ok]
    feats[ok, 3] = np.abs(normal[ok] @ VERTICAL)
    return np.clip(feats, 0.0, 1.0)


def _segment_means(features, labels):
    num = labels.max() + 1
    sums = np.zeros((num, features.shape[1]))
    np.add.at(sums, labels, features)
    counts = np.bincount(labels, minlength=num).astype(np.float64)
    counts[counts == 0] = 1.0
    return sums / counts[:, None]


def segmentation_energy(features, graph, labels, mu):
    """Piecewise-constant fit error plus mu-weighted boundary length."""
    labels = np.asarray(labels)
    g = _segment_means(features, labels)[labels]
    data = float(((g - features) ** 2).sum())
    if len(graph.edges) == 0:
        return data
    cut = labels[graph.edges[:, 0]] != labels[graph.edges[:, 1]]
    return data + mu * float(graph.edge_weights()[cut].sum())


def compact_labels(labels):
    """Relabel to 0..S-1 in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse.reshape(-1)]


@dataclass
class Segmentation:
    labels: np.ndarray
    energy: float
    history: list

    @property
    def num_segments(self):
        return int(self.labels.max()) + 1


def potts_segmentation(features, graph, mu, min_segments=1):
    """Greedy region merging on the k-NN graph.

    Starts from singletons and repeatedly merges the adjacent pair whose merge
    lowers the energy the most, until no merge helps or ``min_segments`` is hit.
    ``history`` records the energy after every merge (first entry: initial).
    """
    n = len(features)
    weights = graph.edge_weights()
    size = [1] * n
    # plain-float sums: the 4-vectors are too small for numpy to pay off
    total = features.tolist()
    nbrs = [dict() for _ in range(n)]
    for (i, j), w in zip(graph.edges.tolist(), weights.tolist()):
        nbrs[i][j] = nbrs[i].get(j, 0.0) + w
        nbrs[j][i] = nbrs[j].get(i, 0.0) + w
    version = [0] * n
    parent = list(range(n))
    alive = n

    # merge gain na*nb/(na+nb) * |mean_a - mean_b|^2 - mu*w_ab, written with totals
    def delta(a, b):
        na, nb = size[a], size[b]
        sq = sum([(u * nb - v * na) ** 2 for u, v in zip(total[a], total[b])])
        return sq / (na * nb * (na + nb)) - mu * nbrs[a][b]

    def delta4(a, b):
        na, nb = size[a], size[b]
        a0, a1, a2, a3 = total[a]
        b0, b1, b2, b3 = total[b]
        d0, d1, d2, d3 = a0 * nb - b0 * na, a1 * nb - b1 * na, a2 * nb - b2 * na, a3 * nb - b3 * na
        return (d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3) / (na * nb * (na + nb)) - mu * nbrs[a][b]

    if features.ndim == 2 and features.shape[1] == 4:
        delta = delta4  # noqa: F811 - the usual case, unrolled

    if len(graph.edges):
        e = graph.edges
        diff = features[e[:, 0]] - features[e[:, 1]]
        init = 0.5 * (diff * diff).sum(axis=1) - mu * np.array(
            [nbrs[i][j] for i, j in e.tolist()])
        heap = [(d, i, j, 0, 0) for d, (i, j) in zip(init.tolist(), e.tolist())]
    else:
        heap = []
    heapq.heapify(heap)

    energy = mu * float(weights.sum())
    history = [energy]
    while heap and alive > min_segments:
        d, a, b, va, vb = heapq.heappop(heap)
        if version[a] != va or version[b] != vb or parent[a] != a or parent[b] != b:
            continue
        if d >= 0:
            break
        # merge b into a
        size[a] += size[b]
        total[a] = [u + v for u, v in zip(total[a], total[b])]
        parent[b] = a
        del nbrs[a][b]
        del nbrs[b][a]
        for c, w in nbrs[b].items():
            del nbrs[c][b]
            nbrs[a][c] = nbrs[a].get(c, 0.0) + w
            nbrs[c][a] = nbrs[a][c]
        nbrs[b] = {}
        version[a] += 1
        version[b] += 1
        alive -= 1
        energy += d
        history.append(energy)
        for c in nbrs[a]:
            lo, hi = (a, c) if a < c else (c, a)
            gain = delta(lo, hi)
            # a merge that cannot lower the energy would only ever end the loop
            if gain < 0:
                heapq.heappush(heap, (gain, lo, hi, version[lo], version[hi]))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    labels = compact_labels(np.array([root(i) for i in range(n)]))
    energy = segmentation_energy(features, graph, labels, mu)
    if min_segments <= 1 and alive > 1:
        # pairwise merging can stall above the one-segment labeling; take that
        # global merge as a last move whenever it is strictly better
        single = np.zeros(n, dtype=np.int64)
        single_energy = segmentation_energy(features, graph, single, mu)
        if single_energy < energy:
            labels, energy = single, single_energy
            history.append(energy)
    return Segmentation(labels, energy, history)


def segment_cloud(cloud, k=16, mu=0.3):
    """Convenience wrapper: graph, features, segmentation -> labeled cloud."""
    graph = build_knn_graph(cloud, min(k, len(cloud) - 1))
    feats = compute_geometric_features(cloud, graph)
    seg = potts_segmentation(feats, graph, mu)
    return cloud.with_labels(seg.labels), seg


def fps_sample(cloud, num_samples):
    """Greedy farthest-point sampling seeded at the point farthest from the centroid.

    Returns ``(indices, labels)``; labels is None when the cloud is unlabeled.
    """
    n = len(cloud)
    if num_samples < 1 or num_samples > n:
        raise ValueError(f"cannot sample {num_samples} centers from {n} points")
    pts = cloud.points
    d_centroid = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
    chosen = np.empty(num_samples, dtype=np.int64)
    chosen[0] = int(np.argmax(d_centroid))
    min_d = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    min_d[chosen[0]] = -1.0
    for s in range(1, num_samples):
        nxt = int(np.argmax(min_d))
        chosen[s] = nxt
        min_d = np.minimum(min_d, ((pts - pts[nxt]) ** 2).sum(axis=1))
        # already-chosen points never win again, even among duplicates
        min_d[chosen[: s + 1]] = -1.0
    labels = None if cloud.labels is None else cloud.labels[chosen]
    return chosen, labels
