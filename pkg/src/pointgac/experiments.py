"""Helpers for paired training experiments on the synthetic benchmark."""
import time
from dataclasses import dataclass, field

import numpy as np

from . import training
from .data import build_dataset


@dataclass
class Benchmark:
    dataset: object
    train_patched: list
    val_patched: list

    @property
    def train_labels(self):
        return np.array([s.class_id for s in self.dataset.split("train")])

    @property
    def val_labels(self):
        return np.array([s.class_id for s in self.dataset.split("val")])


@dataclass
class RunSummary:
    cfg: object
    probe: float
    losses: np.ndarray
    window_dead: list
    seconds: float
    seconds_to_step: dict = field(default_factory=dict)
    state: object = None

    def smoothed_loss(self, window=20):
        return np.convolve(self.losses, np.ones(window) / window, mode="valid")


def prepare_benchmark(cfg, dataset=None):
    """Dataset plus patches for both splits, under ``cfg``'s grouping."""
    dataset = dataset or build_dataset(training._data_args(cfg), root=cfg.data.data_dir or None)
    return Benchmark(dataset,
                     training.prepare_patches(dataset.split("train"), cfg),
                     training.prepare_patches(dataset.split("val"), cfg))


def probe_params(params, bench, cfg):
    tx = training.encode_clouds(bench.train_patched, params, cfg)
    vx = training.encode_clouds(bench.val_patched, params, cfg)
    return training.nearest_centroid_accuracy(tx, bench.train_labels, vx, bench.val_labels)


def random_init_probe(bench, cfg):
    params = training.init_student(cfg, np.random.default_rng(cfg.training.seed))
    return probe_params(params, bench, cfg)


def mean_coordinate_probe(bench):
    """Baseline: nearest centroid on each cloud's mean xyz."""
    tx = np.stack([s.cloud.points.mean(axis=0) for s in bench.dataset.split("train")])
    vx = np.stack([s.cloud.points.mean(axis=0) for s in bench.dataset.split("val")])
    return training.nearest_centroid_accuracy(tx, bench.train_labels, vx, bench.val_labels)


def train_and_probe(cfg, bench, marks=(), out_dir=None):
    """Pretrain on ``bench`` and probe the student; ``marks`` are steps to time."""
    t0 = time.perf_counter()
    reached = {}

    def progress(info):
        if info["step"] in marks:
            reached[info["step"]] = time.perf_counter() - t0

    res = training.pretrain_loop(cfg, out_dir=out_dir, dataset=bench.dataset,
                                 patched=bench.train_patched, progress=progress)
    probe = probe_params(res.state.student, bench, cfg)
    return RunSummary(cfg, probe, np.array([m["loss"] for m in res.metrics]),
                      [m["window_dead_fraction"] for m in res.maintenance],
                      time.perf_counter() - t0, reached, res.state)
