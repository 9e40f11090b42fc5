"""Synthetic shape classes, dataset manifests and the segmentation/patch cache."""
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry
from .fileio import atomic_write_bytes, atomic_write_text, format_cloud, load_cloud, save_cloud
from .geometry import PointCloud

SHAPE_CLASSES = ("sphere", "box", "cylinder", "plane-pair")
MIN_POINTS = 64


@dataclass
class SyntheticShapeSpec:
    class_id: int
    n_points: int = 512
    jitter: float = 0.01
    seed: int = 0
    rotate: bool = True

    def __post_init__(self):
        if not 0 <= self.class_id < len(SHAPE_CLASSES):
            raise ValueError(f"class_id must be in [0, {len(SHAPE_CLASSES)})")
        if self.n_points < MIN_POINTS:
            raise ValueError(f"n_points must be >= {MIN_POINTS}")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def _area_weighted_counts(rng, areas, n):
    """Split ``n`` samples over surface pieces in proportion to area.

    Largest-remainder rounding keeps every count within one of its exact
    share; ``rng`` breaks exact remainder ties.
    """
    share = np.asarray(areas, dtype=np.float64) / np.sum(areas) * n
    counts = np.floor(share).astype(np.int64)
    rest = share - counts
    order = np.lexsort((rng.random(len(rest)), -rest))
    counts[order[:n - counts.sum()]] += 1
    return counts


def _sample_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True), {}


def _box_faces(sides):
    a, b, c = sides / 2
    # (fixed axis, sign, the two free axes)
    faces = []
    for axis in range(3):
        free = [i for i in range(3) if i != axis]
        for sign in (-1.0, 1.0):
            faces.append((axis, sign, free))
    half = np.array([a, b, c])
    areas = [4 * half[f[2][0]] * half[f[2][1]] for f in faces]
    return faces, half, np.array(areas)


def _sample_box(rng, n):
    sides = rng.uniform(0.5, 1.5, size=3)
    faces, half, areas = _box_faces(sides)
    counts = _area_weighted_counts(rng, areas, n)
    pts = []
    for (axis, sign, free), m in zip(faces, counts):
        p = np.empty((m, 3))
        p[:, axis] = sign * half[axis]
        for f in free:
            p[:, f] = rng.uniform(-half[f], half[f], size=m)
        pts.append(p)
    return np.concatenate(pts), {"sides": sides, "face_counts": counts, "face_areas": areas}


def _sample_cylinder(rng, n):
    r = rng.uniform(0.3, 0.6)
    h = rng.uniform(1.0, 2.0)
    areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    counts = _area_weighted_counts(rng, areas, n)
    theta = rng.uniform(0, 2 * np.pi, counts[0])
    side = np.stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-h / 2, h / 2, counts[0])], 1)
    caps = []
    for m, z in zip(counts[1:], (-h / 2, h / 2)):
        rad = r * np.sqrt(rng.uniform(0, 1, m))
        phi = rng.uniform(0, 2 * np.pi, m)
        caps.append(np.stack([rad * np.cos(phi), rad * np.sin(phi), np.full(m, z)], 1))
    return np.concatenate([side] + caps), {"radius": r, "height": h}


def _sample_plane_pair(rng, n):
    """Two rectangles sharing an edge along the y axis, opened by a random dihedral angle."""
    angle = rng.uniform(np.pi / 3, 2 * np.pi / 3)
    w1, w2 = rng.uniform(0.8, 1.2, size=2)
    depth = rng.uniform(0.8, 1.2)
    counts = _area_weighted_counts(rng, [w1 * depth, w2 * depth], n)
    u1 = rng.uniform(0, w1, counts[0])
    u2 = rng.uniform(0, w2, counts[1])
    p1 = np.stack([u1, rng.uniform(-depth / 2, depth / 2, counts[0]), np.zeros(counts[0])], 1)
    d = np.array([np.cos(angle), 0.0, np.sin(angle)])
    p2 = u2[:, None] * d + np.stack([np.zeros(counts[1]), rng.uniform(-depth / 2, depth / 2, counts[1]),
                                     np.zeros(counts[1])], 1)
    pts = np.concatenate([p1, p2])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return pts - (lo + hi) / 2, {"angle": angle}


_SAMPLERS = (_sample_sphere, _sample_box, _sample_cylinder, _sample_plane_pair)


def generate_shape(spec, return_meta=False):
    """Surface samples of one shape, jittered, rotated, scaled into the unit ball.

    Shapes are built around the origin; normalization divides by the largest
    point norm, so a jitter-free sphere lands exactly on the unit sphere.
    """
    rng = np.random.default_rng(spec.seed)
    pts, meta = _SAMPLERS[spec.class_id](rng, spec.n_points)
    if spec.jitter > 0:
        pts = pts + spec.jitter * rng.standard_normal(pts.shape)
    if spec.rotate:
        pts = pts @ Rotation.random(random_state=rng).as_matrix().T
    pts = pts / np.linalg.norm(pts, axis=1).max()
    cloud = PointCloud(pts)
    if return_meta:
        return cloud, spec.class_id, meta
    return cloud, spec.class_id


def cloud_digest(cloud):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
    return h.hexdigest()


def segmentation_cache_key(cloud, mu, k):
    raw = f"{cloud_digest(cloud)}|mu={mu!r}|k={k}|features=v{geometry.FEATURE_VERSION}"
    return hashlib.sha256(raw.encode()).hexdigest()[:24]


class SegmentationCache:
    """Labels stored as labeled ASCII clouds named by (cloud, mu, k, feature version)."""

    def __init__(self, directory):
        self.directory = os.fspath(directory)
        self.hits = 0
        self.misses = 0

    def path_for(self, cloud, mu, k):
        return os.path.join(self.directory, segmentation_cache_key(cloud, mu, k) + ".xyz")

    def labels(self, cloud, mu, k):
        path = self.path_for(cloud, mu, k)
        if os.path.exists(path):
            cached = load_cloud(path)
            if len(cached) == len(cloud):
                self.hits += 1
                return cached.labels, path
        self.misses += 1
        labeled, _ = geometry.segment_cloud(cloud, k, mu)
        save_cloud(path, labeled)
        return labeled.labels, path


@dataclass
class Sample:
    cloud: PointCloud
    class_id: int
    path: str = None
    cache_path: str = None
    labels: np.ndarray = None

    def labeled(self):
        return self.cloud if self.labels is None else self.cloud.with_labels(self.labels)


@dataclass
class Dataset:
    samples: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    manifest_path: str = None
    info: dict = field(default_factory=dict)

    def split(self, name):
        idx = self.train_idx if name == "train" else self.val_idx
        return [self.samples[i] for i in idx]

    def digest(self):
        h = hashlib.sha256()
        for s in self.samples:
            h.update(cloud_digest(s.cloud).encode())
            h.update(str(s.class_id).encode())
        h.update(np.asarray(self.train_idx).tobytes())
        return h.hexdigest()


def write_manifest(path, samples):
    lines = [f"{s.path} {s.class_id} {s.cache_path or '-'}" for s in samples]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'path class_id cache_path'")
            cache = None if parts[2] == "-" else parts[2]
            entries.append((parts[0], int(parts[1]), cache))
    return entries


def build_dataset(cfg, root=None, segment=True):
    """Balanced synthetic dataset with a seeded stratified train/val split.

    ``cfg`` is a :class:`pointgac.config.DataConfig`-like object with
    ``num_classes, per_class, n_points, jitter, seed, train_fraction`` and
    geometry ``k``/``mu`` passed via ``cfg.k``/``cfg.mu``. With ``root`` set,
    clouds, the manifest and the segmentation cache are written under it.
    """
    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.num_classes * cfg.per_class)
    samples = []
    cache = SegmentationCache(os.path.join(root, "cache")) if root else None
    for c in range(cfg.num_classes):
        for i in range(cfg.per_class):
            seed = int(seeds[c * cfg.per_class + i])
            cloud, label = generate_shape(SyntheticShapeSpec(c, cfg.n_points, cfg.jitter, seed))
            sample = Sample(cloud, label)
            if root:
                sample.path = os.path.join(root, "clouds", f"{SHAPE_CLASSES[c]}_{i:04d}.xyz")
                if not os.path.exists(sample.path):
                    atomic_write_bytes(sample.path, format_cloud(cloud).encode())
            if segment:
                if cache is not None:
                    sample.labels, sample.cache_path = cache.labels(cloud, cfg.mu, cfg.k)
                else:
                    sample.labels = geometry.segment_cloud(cloud, cfg.k, cfg.mu)[0].labels
            samples.append(sample)
    rng = np.random.default_rng(cfg.seed)
    train, val = [], []
    for c in range(cfg.num_classes):
        idx = c * cfg.per_class + rng.permutation(cfg.per_class)
        n_train = int(round(cfg.train_fraction * cfg.per_class))
        train.extend(idx[:n_train].tolist())
        val.extend(idx[n_train:].tolist())
    ds = Dataset(samples, np.array(sorted(train)), np.array(sorted(val)))
    if root:
        ds.manifest_path = os.path.join(root, "manifest.txt")
        write_manifest(ds.manifest_path, samples)
    if cache is not None:
        ds.info.update(cache_hits=cache.hits, cache_misses=cache.misses)
    return ds
