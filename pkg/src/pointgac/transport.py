"""Label-masked entropic optimal transport from points to patch centers."""
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, fps_sample, segment_cloud


class UnassignablePointError(ValueError):
    """A point's geometric label matches none of the sampled centers."""


@dataclass
class TransportProblem:
    cost: np.ndarray
    mask: np.ndarray
    epsilon: float = None
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.cost.shape != self.mask.shape:
            raise ValueError("cost and mask shapes differ")
        if not self.mask.any(axis=1).all():
            raise UnassignablePointError("every point needs at least one admissible center")
        if not np.all(np.isfinite(self.cost[self.mask])):
            raise ValueError("cost must be finite on admissible entries")
        if self.epsilon is None:
            self.epsilon = default_epsilon(self.cost, self.mask)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class TransportPlan:
    plan: np.ndarray
    converged: bool
    iterations: int
    row_deviation: float
    col_deviation: float


def default_epsilon(cost, mask, scale=0.05):
    mean = float(cost[mask].mean()) if mask.any() else 0.0
    return scale * mean if mean > 0 else 1e-3


def build_cost_matrix(points, centers):
    """Squared Euclidean distance between every point and every center."""
    p = np.asarray(points, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    diff = p[:, None, :] - c[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def build_label_mask(point_labels, center_labels):
    point_labels = np.asarray(point_labels)
    center_labels = np.asarray(center_labels)
    mask = point_labels[:, None] == center_labels[None, :]
    orphans = np.flatnonzero(~mask.any(axis=1))
    if len(orphans):
        raise UnassignablePointError(
            f"{len(orphans)} point(s) have labels with no center, e.g. point "
            f"{orphans[0]} label {point_labels[orphans[0]]}"
        )
    return mask


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _scaling_loop(lse_col, update, col_target, max_iters, tol):
    """Shared Sinkhorn iteration: alternate column and row scalings until the
    column sums of the row-normalized plan are within ``tol`` of the target."""
    converged = False
    col_dev = np.inf
    it = 0
    while True:
        col = lse_col()
        if it > 0:
            col_dev = float(np.abs(col - col_target).max() / col_target)
            if col_dev <= tol:
                converged = True
                break
        if it == max_iters:
            break
        it += 1
        update()
    return converged, it, col_dev


def _sinkhorn_exp(log_k, mask, col_target, max_iters, tol):
    # each row shifted so its best admissible entry is exactly 1; no row can underflow
    K = np.exp(log_k - log_k.max(axis=1, keepdims=True))
    usable = mask.any(axis=0)
    if not (K.max(axis=0)[usable] > 0).all():
        return None
    n, L = K.shape
    s = {"u": np.ones(n), "v": np.ones(L)}

    def col_sums():
        s["kt_u"] = K.T @ s["u"]
        return s["v"] * s["kt_u"]

    def update():
        with np.errstate(divide="ignore"):
            s["v"] = np.where(usable, col_target / s["kt_u"], 1.0)
        s["u"] = 1.0 / (K @ s["v"])

    converged, it, col_dev = _scaling_loop(col_sums, update, col_target, max_iters, tol)
    u, v = s["u"], s["v"]
    if not (np.isfinite(u).all() and np.isfinite(v).all() and (u > 0).all()):
        return None
    return u[:, None] * K * v[None, :], converged, it, col_dev


def _sinkhorn_log(log_k, mask, col_target, max_iters, tol):
    n, L = log_k.shape
    log_b = np.log(col_target)
    # same starting point as the scaled path: u = 1 on the row-shifted kernel
    s = {"u": -log_k.max(axis=1), "v": np.zeros(L)}

    def col_sums():
        s["lse"] = _logsumexp(log_k + s["u"][:, None], axis=0)
        return np.exp(s["v"] + s["lse"])

    def update():
        # columns no point may use keep a neutral scaling
        s["v"] = np.where(np.isfinite(s["lse"]), log_b - s["lse"], 0.0)
        s["u"] = -_logsumexp(log_k + s["v"][None, :], axis=1)

    converged, it, col_dev = _scaling_loop(col_sums, update, col_target, max_iters, tol)
    with np.errstate(under="ignore"):
        plan = np.exp(log_k + s["u"][:, None] + s["v"][None, :])
    return plan, converged, it, col_dev


def sinkhorn_masked(problem):
    """Sinkhorn with rows summing to 1 and columns to N/L.

    Masked-out entries get -inf in the log kernel, so the plan is exactly
    zero there. Iteration stops once the column sums are within ``tol``
    (relative to N/L) after a row normalization; the returned plan always
    ends on a row normalization. Scalings run on a row-stabilized kernel
    and drop to log-domain updates if that kernel would under- or overflow.
    """
    cost, mask = problem.cost, problem.mask
    n, L = cost.shape
    log_k = np.where(mask, -cost / problem.epsilon, -np.inf)
    args = (log_k, mask, n / L, problem.max_iters, problem.tol)
    with np.errstate(under="ignore", over="ignore"):
        out = _sinkhorn_exp(*args)
    if out is None:
        out = _sinkhorn_log(*args)
    plan, converged, it, col_dev = out
    plan[~mask] = 0.0
    row_dev = float(np.abs(plan.sum(axis=1) - 1.0).max())
    return TransportPlan(plan, converged, it, row_dev, col_dev)


@dataclass
class PatchSet:
    patch_of: np.ndarray
    centers: np.ndarray
    center_labels: np.ndarray
    patch_points: list
    center_indices: np.ndarray = None
    point_labels: np.ndarray = None
    overlapping: bool = False
    info: dict = field(default_factory=dict)

    @property
    def num_patches(self):
        return len(self.centers)

    def sizes(self):
        return np.array([len(p) for p in self.patch_points])

    def check(self, num_points):
        """Raise AssertionError if a disjoint-partition invariant fails."""
        members = np.concatenate(self.patch_points) if self.patch_points else np.array([])
        assert all(len(p) > 0 for p in self.patch_points), "empty patch"
        if self.overlapping:
            return
        assert len(members) == num_points, "patches do not cover the cloud exactly once"
        assert np.array_equal(np.sort(members), np.arange(num_points)), "not a partition"
        for j, pts in enumerate(self.patch_points):
            assert np.all(self.patch_of[pts] == j), "patch_of disagrees with patch lists"
        if self.point_labels is not None:
            assert np.all(self.point_labels == self.center_labels[self.patch_of]), "impure patch"


def _patch_lists(patch_of, L):
    order = np.argsort(patch_of, kind="stable")
    bounds = np.searchsorted(patch_of[order], np.arange(L + 1))
    return [order[bounds[j]:bounds[j + 1]] for j in range(L)]


def extract_patches(plan, mask, cloud, centers, center_labels, center_indices=None):
    """Hard assignment by masked argmax, then refill empty patches.

    An empty patch takes, from the largest patch sharing its label, the
    member with the highest plan mass toward it.
    """
    q = np.where(mask, plan, -1.0)
    patch_of = np.argmax(q, axis=1)
    center_labels = np.asarray(center_labels)
    L = len(center_labels)
    counts = np.bincount(patch_of, minlength=L)
    repairs = 0
    while (counts == 0).any():
        j = int(np.flatnonzero(counts == 0)[0])
        same = np.flatnonzero((center_labels == center_labels[j]) & (counts > 1))
        if len(same) == 0:
            raise UnassignablePointError(f"cannot refill patch {j}: no donor with its label")
        donor = int(same[np.argmax(counts[same])])
        members = np.flatnonzero(patch_of == donor)
        pick = int(members[np.argmax(plan[members, j])])
        patch_of[pick] = j
        counts[donor] -= 1
        counts[j] += 1
        repairs += 1
    point_labels = center_labels[patch_of] if cloud.labels is None else cloud.labels
    return PatchSet(
        patch_of=patch_of,
        centers=np.asarray(centers, dtype=np.float64),
        center_labels=center_labels,
        patch_points=_patch_lists(patch_of, L),
        center_indices=center_indices,
        point_labels=point_labels,
        info={"repairs": repairs},
    )


def knn_grouping(cloud, num_patches, patch_size):
    """FPS centers with each patch the ``patch_size`` nearest points (may overlap)."""
    n = len(cloud)
    if patch_size < 1 or patch_size > n:
        raise ValueError(f"patch_size must be in [1, {n}]")
    idx, labels = fps_sample(cloud, num_patches)
    centers = cloud.points[idx]
    d = build_cost_matrix(cloud.points, centers)
    order = np.argsort(d, axis=0, kind="stable")[:patch_size].T
    patch_of = np.argmin(d, axis=1)
    return PatchSet(
        patch_of=patch_of,
        centers=centers,
        center_labels=labels if labels is not None else np.zeros(num_patches, dtype=np.int64),
        patch_points=[row.copy() for row in order],
        center_indices=idx,
        overlapping=True,
    )


def absorb_orphan_segments(cloud, center_idx):
    """Relabel segments that received no center to the label of the nearest center.

    The nearest center is the one closest to any point of the orphan segment.
    Returns the adjusted label array.
    """
    labels = cloud.labels.copy()
    center_labels = labels[center_idx]
    covered = set(center_labels.tolist())
    centers = cloud.points[center_idx]
    for seg in np.unique(labels):
        if seg in covered:
            continue
        members = np.flatnonzero(cloud.labels == seg)
        d = build_cost_matrix(cloud.points[members], centers)
        nearest = np.unravel_index(np.argmin(d), d.shape)[1]
        labels[members] = center_labels[nearest]
    return labels


@dataclass
class PartitionConfig:
    grouping: str = "gap"
    k: int = 16
    mu: float = 0.3
    epsilon_scale: float = 0.05
    max_iters: int = 200
    tol: float = 1e-6
    patch_size: int = 32


def partition_pipeline(cloud, num_patches, config=None):
    """Segment (unless the cloud already carries labels), sample centers, transport, cut.

    With ``config.grouping == "knn"`` the overlapping FPS+KNN baseline is
    returned instead.
    """
    config = config or PartitionConfig()
    n = len(cloud)
    if num_patches < 1 or num_patches > n:
        raise ValueError(f"cannot build {num_patches} patches from {n} points")
    if config.grouping == "knn":
        return knn_grouping(cloud, num_patches, min(config.patch_size, n))
    if config.grouping != "gap":
        raise ValueError(f"unknown grouping {config.grouping!r}")
    if cloud.labels is None:
        if n > 1:
            cloud, _ = segment_cloud(cloud, config.k, config.mu)
        else:
            cloud = cloud.with_labels(np.zeros(1, dtype=np.int64))
    center_idx, _ = fps_sample(cloud, num_patches)
    labels = absorb_orphan_segments(cloud, center_idx)
    cloud = PointCloud(cloud.points, labels)
    center_labels = labels[center_idx]
    centers = cloud.points[center_idx]
    cost = build_cost_matrix(cloud.points, centers)
    mask = build_label_mask(labels, center_labels)
    problem = TransportProblem(
        cost, mask, default_epsilon(cost, mask, config.epsilon_scale), config.max_iters, config.tol
    )
    result = sinkhorn_masked(problem)
    patches = extract_patches(result.plan, mask, cloud, centers, center_labels, center_idx)
    patches.info.update(
        converged=result.converged, iterations=result.iterations, col_deviation=result.col_deviation
    )
    return patches
