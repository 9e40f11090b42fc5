"""Online k-means codebook with EMA statistics and frequency-weighted maintenance."""
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .fileio import atomic_write_bytes, atomic_write_text

TAU_TEACHER_START = 0.07
TAU_TEACHER_END = 0.04
TAU_STUDENT = 0.1
GAMMA = 0.99


@dataclass
class Codebook:
    C: np.ndarray
    N_acc: np.ndarray
    M_acc: np.ndarray
    update_count: np.ndarray
    gamma: float = GAMMA
    # hits since the last reset_window(); drives the dead-vector diagnostic
    recent_count: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.recent_count is None:
            self.recent_count = np.zeros(len(self.C))

    @property
    def size(self):
        return self.C.shape[0]

    @property
    def dim(self):
        return self.C.shape[1]

    def copy(self):
        return Codebook(self.C.copy(), self.N_acc.copy(), self.M_acc.copy(),
                        self.update_count.copy(), self.gamma, self.recent_count.copy())

    def reset_window(self):
        self.recent_count = np.zeros(self.size)

    def decay_counts(self, factor=0.5):
        self.update_count = self.update_count * factor

    def blocks(self, prefix="codebook."):
        return {
            prefix + "C": self.C,
            prefix + "N_acc": self.N_acc,
            prefix + "M_acc": self.M_acc,
            prefix + "update_count": self.update_count,
            prefix + "recent_count": self.recent_count,
            prefix + "gamma": np.array([self.gamma]),
        }

    @classmethod
    def from_blocks(cls, blocks, prefix="codebook."):
        return cls(
            blocks[prefix + "C"].copy(),
            blocks[prefix + "N_acc"].copy(),
            blocks[prefix + "M_acc"].copy(),
            blocks[prefix + "update_count"].copy(),
            float(blocks[prefix + "gamma"][0]),
            blocks[prefix + "recent_count"].copy(),
        )


@dataclass
class Assignment:
    Q: np.ndarray
    hard: np.ndarray


def init_codebook(pool, K, rng, gamma=GAMMA, jitter=1e-3):
    """Draw K distinct rows from ``pool``; top up with jittered copies if short."""
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or len(pool) == 0:
        raise ValueError("feature pool must be a non-empty 2-D array")
    unique = np.unique(pool, axis=0)
    if len(unique) >= K:
        C = unique[rng.choice(len(unique), K, replace=False)]
    else:
        scale = jitter * max(float(unique.std()), 1.0)
        extra = unique[rng.integers(0, len(unique), K - len(unique))]
        extra = extra + scale * rng.standard_normal(extra.shape)
        C = np.concatenate([unique[rng.permutation(len(unique))], extra])
    C = np.ascontiguousarray(C)
    return Codebook(C.copy(), np.ones(K), C.copy(), np.zeros(K), gamma)


def _unit(x, eps=1e-12):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def similarity(features, codebook, mode="cosine"):
    if mode == "cosine":
        return _unit(features) @ _unit(codebook.C).T
    if mode == "dot":
        return features @ codebook.C.T
    raise ValueError(f"unknown similarity {mode!r}")


def nearest_code(features, codebook, metric="euclidean"):
    """Index of the closest code per row; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != codebook.dim:
        raise ValueError("feature dimension does not match the codebook")
    if metric == "euclidean":
        # |f|^2 is constant per row and dropped
        score = (codebook.C ** 2).sum(axis=1)[None, :] - 2.0 * features @ codebook.C.T
        return np.argmin(score, axis=1)
    return np.argmax(similarity(features, codebook, metric), axis=1)


def kmeans_update(codebook, features, assignments):
    """One EMA step of the cluster counts and sums, then recompute the centers."""
    K = codebook.size
    n = np.bincount(assignments, minlength=K).astype(np.float64)
    m = np.zeros_like(codebook.M_acc)
    np.add.at(m, assignments, features)
    g = codebook.gamma
    codebook.N_acc = g * codebook.N_acc + (1 - g) * n
    codebook.M_acc = g * codebook.M_acc + (1 - g) * m
    codebook.C = codebook.M_acc / codebook.N_acc[:, None]
    hit = (n > 0).astype(np.float64)
    codebook.update_count = codebook.update_count + hit
    codebook.recent_count = codebook.recent_count + hit
    return codebook


def soft_assign(features, codebook, tau, mode="cosine"):
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = similarity(np.asarray(features, dtype=np.float64), codebook, mode) / tau
    Q = softmax(logits, axis=1)
    return Assignment(Q, np.argmax(logits, axis=1))


def teacher_temperature(step, total_steps, start=TAU_TEACHER_START, end=TAU_TEACHER_END):
    """Cosine anneal from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if total_steps <= 0:
        return end
    step = min(max(step, 0), total_steps)
    return end + 0.5 * (start - end) * (1.0 + np.cos(np.pi * step / total_steps))


def maintenance_weights(update_count, epsilon=None):
    """Per-code blend weight: large for rarely updated codes, small for busy ones."""
    x = np.asarray(update_count, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    x_bar = 0.5 * (lo + hi)
    if epsilon is None:
        epsilon = 6.0 / (hi - lo + 1.0)
    return expit(-epsilon * (x - x_bar)), epsilon, x_bar


@dataclass
class MaintenanceReport:
    alpha: np.ndarray
    epsilon: float
    x_bar: float
    dead_vectors: int
    mean_shift: float

    def summary(self):
        return {
            "alpha_min": float(self.alpha.min()),
            "alpha_mean": float(self.alpha.mean()),
            "alpha_max": float(self.alpha.max()),
            "epsilon": self.epsilon,
            "x_bar": self.x_bar,
            "dead_vectors": self.dead_vectors,
            "mean_shift": self.mean_shift,
        }


def maintenance_step(codebook, teacher_features, epsilon=None, mode="meaningful", rng=None):
    """Pull each code toward a target, weighted by how rarely it has been updated.

    ``meaningful``: the target is the batch teacher feature most cosine-similar
    to the code. ``random``: the target is the code plus isotropic Gaussian
    noise scaled to the batch feature spread.
    """
    feats = np.asarray(teacher_features, dtype=np.float64)
    if len(feats) == 0:
        raise ValueError("maintenance needs at least one teacher feature")
    alpha, eps, x_bar = maintenance_weights(codebook.update_count, epsilon)
    if mode == "meaningful":
        target = feats[np.argmax(_unit(codebook.C) @ _unit(feats).T, axis=1)]
    elif mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        target = codebook.C + feats.std() * rng.standard_normal(codebook.C.shape)
    else:
        raise ValueError(f"unknown maintenance mode {mode!r}")
    old = codebook.C
    new = old * (1.0 - alpha[:, None]) + target * alpha[:, None]
    codebook.C = new
    codebook.M_acc = new * codebook.N_acc[:, None]
    shift = float(np.linalg.norm(new - old, axis=1).mean())
    dead = int((codebook.update_count == 0).sum())
    return codebook, MaintenanceReport(alpha, eps, x_bar, dead, shift)


def dead_fraction(codebook, threshold=0.0, window=False):
    counts = codebook.recent_count if window else codebook.update_count
    return float((counts <= threshold).mean())


def heatmap_bytes(counts, H, W):
    counts = np.asarray(counts, dtype=np.float64)
    if H * W != counts.size:
        raise ValueError(f"heatmap shape {H}x{W} does not hold {counts.size} codes")
    lo, hi = counts.min(), counts.max()
    if hi > lo:
        pix = np.rint((counts - lo) / (hi - lo) * 255.0)
    else:
        pix = np.full(counts.shape, 255.0 if hi > 0 else 0.0)
    header = f"P5\n{W} {H}\n255\n".encode("ascii")
    return header + pix.astype(np.uint8).reshape(H, W).tobytes()


def utilization_export(codebook, H, W, path, counts=None):
    """Write update counts as a binary PGM heatmap and a sibling CSV.

    Returns ``(pgm_path, csv_path)``.
    """
    counts = codebook.update_count if counts is None else counts
    payload = heatmap_bytes(counts, H, W)
    path = os.fspath(path)
    csv_path = os.path.splitext(path)[0] + ".csv"
    atomic_write_bytes(path, payload)
    rows = ["row,col,code,count"]
    for k, c in enumerate(np.asarray(counts).tolist()):
        rows.append(f"{k // W},{k % W},{k},{c!r}")
    atomic_write_text(csv_path, "\n".join(rows) + "\n")
    return path, csv_path
