"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``CRITERION n PASS|FAIL`` line (collected again in the
terminal summary). Training runs are shared through a session cache, so
criteria 6, 7, 8 and 10 reuse the same seed-0 maintenance run. Set
``POINTGAC_ACCEPT_DIR`` to keep the generated dataset and its segmentation
cache between sessions.
"""
import itertools
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from pointgac import codebook as cb
from pointgac import experiments, training
from pointgac.config import RunConfig, micro_scale
from pointgac.data import SyntheticShapeSpec, build_dataset, generate_shape
from pointgac.geometry import (
    PointCloud,
    build_knn_graph,
    compute_geometric_features,
    potts_segmentation,
    segmentation_energy,
)
from pointgac.transport import (
    TransportProblem,
    build_cost_matrix,
    build_label_mask,
    default_epsilon,
    extract_patches,
    partition_pipeline,
    sinkhorn_masked,
)

pytestmark = pytest.mark.acceptance


# -- 1: Sinkhorn -------------------------------------------------------------------


def feasible_instance(rng, n, L):
    """Masked instance in which every segment holds exactly n/L points per center."""
    center_labels = rng.integers(0, max(1, L // 2), L)
    _, center_labels = np.unique(center_labels, return_inverse=True)
    sizes = np.bincount(center_labels) * (n // L)
    point_labels = np.repeat(np.arange(len(sizes)), sizes)
    rng.shuffle(point_labels)
    m = int(sizes.sum())
    return rng.standard_normal((m, 3)), rng.standard_normal((L, 3)), point_labels, center_labels


def best_balanced_two_way(cost, mask):
    n = len(cost)
    rows = np.arange(n)
    best = np.inf
    for combo in itertools.product((0, 1), repeat=n):
        a = np.array(combo)
        if mask[rows, a].all() and abs(2 * int(a.sum()) - n) <= 1:
            best = min(best, float(cost[rows, a].sum()))
    return best


def test_criterion_01_sinkhorn(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_row = worst_col = worst_ratio = 0.0
    masked_zero = True
    n_small = 0
    for i in range(50):
        if i < 20:
            n, L = int(rng.integers(2, 11)), 2
        else:
            n, L = int(rng.integers(11, 65)), int(rng.integers(1, 9))
        pts, ctr, pl, cl = feasible_instance(rng, n, L)
        n = len(pts)
        mask = build_label_mask(pl, cl)
        cost = build_cost_matrix(pts, ctr)
        res = sinkhorn_masked(TransportProblem(cost, mask, default_epsilon(cost, mask)))
        worst_row = max(worst_row, float(np.abs(res.plan.sum(axis=1) - 1).max()))
        worst_col = max(worst_col, float(np.abs(res.plan.sum(axis=0) - n / L).max() / (n / L)))
        masked_zero &= bool((res.plan[~mask] == 0.0).all())
        if n <= 10 and L == 2:
            n_small += 1
            ps = extract_patches(res.plan, mask, PointCloud(pts, pl), ctr, cl)
            got = float(cost[np.arange(n), ps.patch_of].sum())
            worst_ratio = max(worst_ratio, got / best_balanced_two_way(cost, mask))
    seconds = time.perf_counter() - t0
    ok = worst_row <= 1e-6 and masked_zero and worst_col <= 0.01 and worst_ratio <= 1.05 and seconds < 10
    detail = (f"max row err {worst_row:.1e}, masked zero {masked_zero}, max col dev {worst_col:.2%}, "
              f"worst hard/optimal {worst_ratio:.4f} over {n_small} small instances")
    assert report_criterion(1, "Sinkhorn correctness", ok, detail, seconds)


# -- 2: partition invariants ---------------------------------------------------------


def test_criterion_02_partition_invariants(report_criterion):
    cfg = RunConfig()
    pcfg = training.partition_config(cfg)
    L = cfg.transport.num_patches
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    bad = []
    for i in range(200):
        spec = SyntheticShapeSpec(int(rng.integers(0, 4)), cfg.data.n_points, cfg.data.jitter,
                                  int(rng.integers(0, 2**31)))
        cloud = generate_shape(spec)[0]
        ps = partition_pipeline(cloud, L, pcfg)
        members = np.concatenate(ps.patch_points)
        disjoint = len(members) == len(np.unique(members))
        exhaustive = np.array_equal(np.sort(members), np.arange(len(cloud)))
        non_empty = all(len(p) > 0 for p in ps.patch_points) and ps.num_patches == L
        pure = all((ps.point_labels[p] == ps.center_labels[j]).all() for j, p in enumerate(ps.patch_points))
        if not (disjoint and exhaustive and non_empty and pure):
            bad.append((i, disjoint, exhaustive, non_empty, pure))
    seconds = time.perf_counter() - t0
    ok = not bad and seconds < 60
    detail = f"{200 - len(bad)}/200 clouds disjoint, exhaustive, non-empty and pure" + (
        f"; first failure {bad[0]}" if bad else "")
    assert report_criterion(2, "Partition invariants", ok, detail, seconds)


# -- 3: Potts monotonicity ---------------------------------------------------------


def test_criterion_03_potts_monotone(report_criterion):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    failures = []
    for i in range(100):
        n = int(rng.integers(64, 513))
        spec = SyntheticShapeSpec(int(rng.integers(0, 4)), n, float(rng.uniform(0, 0.03)), int(rng.integers(0, 2**31)))
        cloud = generate_shape(spec)[0]
        graph = build_knn_graph(cloud, int(rng.choice([8, 12, 16])))
        feats = compute_geometric_features(cloud, graph)
        mu = float(np.exp(rng.uniform(np.log(0.005), np.log(1.0))))
        seg = potts_segmentation(feats, graph, mu)
        monotone = all(b <= a for a, b in zip(seg.history, seg.history[1:]))
        one = segmentation_energy(feats, graph, np.zeros(n, dtype=np.int64), mu)
        each = segmentation_energy(feats, graph, np.arange(n), mu)
        slack = 1e-9 * max(1.0, one, each)
        if not (monotone and seg.energy <= one + slack and seg.energy <= each + slack):
            failures.append((i, monotone, seg.energy, one, each))
    seconds = time.perf_counter() - t0
    ok = not failures and seconds < 60
    detail = f"{100 - len(failures)}/100 monotone and below both trivial labelings" + (
        f"; first failure {failures[0]}" if failures else "")
    assert report_criterion(3, "Potts energy monotonicity", ok, detail, seconds)


# -- 4: gradient fidelity ------------------------------------------------------------


def test_criterion_04_gradient_fidelity(report_criterion):
    cfg = micro_scale()
    m = cfg.model
    assert (m.dim, cfg.transport.num_patches, cfg.codebook.size, m.encoder_depth, m.decoder_depth) == (8, 4, 16, 1, 1)
    t0 = time.perf_counter()
    report = training.pipeline_gradcheck(cfg, tolerance=1e-4, h=1e-5)
    seconds = time.perf_counter() - t0
    ok = report.passed and seconds < 120
    worst = max(report.errors, key=report.errors.get)
    detail = f"max relative error {report.max_error:.2e} ({worst}) over {len(report.errors)} blocks"
    assert report_criterion(4, "Full student-pipeline gradient check", ok, detail, seconds)


# -- 5: EMA closed form ------------------------------------------------------------


def test_criterion_05_ema_closed_form(report_criterion):
    rng = np.random.default_rng(5)
    K, D, gamma = 16, 8, 0.99
    C = rng.standard_normal((K, D))
    book = cb.Codebook(C.copy(), np.ones(K), C.copy(), np.zeros(K), gamma)
    N0, M0 = book.N_acc.copy(), book.M_acc.copy()
    feats = rng.standard_normal((40, D))
    assign = rng.integers(0, K - 3, 40)  # the last three codes never receive features
    n = np.bincount(assign, minlength=K).astype(float)
    m = np.zeros((K, D))
    np.add.at(m, assign, feats)
    t0 = time.perf_counter()
    worst = 0.0
    for t in range(1, 1001):
        cb.kmeans_update(book, feats, assign)
        g = gamma ** t
        worst = max(worst, float(np.abs(book.N_acc - (g * N0 + (1 - g) * n)).max()),
                    float(np.abs(book.M_acc - (g * M0 + (1 - g) * m)).max()))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-10 and seconds < 1
    assert report_criterion(5, "EMA closed form", ok, f"max deviation {worst:.2e} over 1000 steps", seconds)


# -- shared desk-scale runs --------------------------------------------------------


@pytest.fixture(scope="session")
def desk_setup(tmp_path_factory):
    root = os.environ.get("POINTGAC_ACCEPT_DIR") or str(tmp_path_factory.mktemp("accept"))
    cfg = RunConfig().replace(data__data_dir=os.path.join(root, "data"))
    t0 = time.perf_counter()
    dataset = build_dataset(training._data_args(cfg), root=cfg.data.data_dir)
    return cfg, dataset, time.perf_counter() - t0


class RunCache:
    def __init__(self, cfg, dataset, data_seconds):
        self.cfg, self.dataset, self.data_seconds = cfg, dataset, data_seconds
        self.benches, self.bench_seconds, self.runs = {}, {}, {}

    def bench(self, grouping):
        if grouping not in self.benches:
            t0 = time.perf_counter()
            cfg = self.cfg.replace(transport__grouping=grouping)
            self.benches[grouping] = experiments.prepare_benchmark(cfg, self.dataset)
            self.bench_seconds[grouping] = time.perf_counter() - t0
        return self.benches[grouping]

    def run(self, grouping="gap", maintenance="meaningful", seed=0):
        key = (grouping, maintenance, seed)
        if key not in self.runs:
            cfg = self.cfg.replace(transport__grouping=grouping, codebook__maintenance=maintenance,
                                   training__seed=seed)
            self.runs[key] = experiments.train_and_probe(cfg, self.bench(grouping), marks=(200,))
        return self.runs[key]


@pytest.fixture(scope="session")
def runs(desk_setup):
    return RunCache(*desk_setup)


# -- 6: maintenance phenomenon -------------------------------------------------------


def test_criterion_06_maintenance_ordering(runs, report_criterion):
    on = runs.run(maintenance="meaningful")
    off = runs.run(maintenance="off")
    rand = runs.run(maintenance="random")
    d_on, d_off, d_rand = on.window_dead[-1], off.window_dead[-1], rand.window_dead[-1]
    seconds = on.seconds + off.seconds
    halved = d_on <= 0.5 * d_off
    between = d_on <= d_rand <= d_off
    ok = halved and between and seconds < 30 * 60
    detail = (f"dead fraction off {d_off:.3f}, random {d_rand:.3f}, meaningful {d_on:.3f} "
              f"(meaningful <= half of off: {halved}; random between: {between}); "
              f"random run {rand.seconds:.0f}s")
    assert report_criterion(6, "Maintenance reduces dead codes", ok, detail, seconds)


# -- 7: training sanity --------------------------------------------------------------


def test_criterion_07_loss_decreases(runs, report_criterion):
    run = runs.run()
    sm = run.smoothed_loss(20)
    initial, at_200 = float(sm[0]), float(sm[200 - 20])
    finite = bool(np.isfinite(run.losses).all())
    seconds = run.seconds_to_step.get(200, np.inf)
    ok = finite and at_200 < 0.7 * initial and seconds < 10 * 60
    detail = f"smoothed loss {initial:.4f} -> {at_200:.4f} at step 200 (ratio {at_200 / initial:.3f}), finite {finite}"
    assert report_criterion(7, "Pretraining loss decreases", ok, detail, seconds)


# -- 8: representation quality -------------------------------------------------------


def test_criterion_08_probe_quality(runs, report_criterion):
    run = runs.run()
    bench = runs.bench("gap")
    t0 = time.perf_counter()
    random_acc = experiments.random_init_probe(bench, runs.cfg)
    baseline = experiments.mean_coordinate_probe(bench)
    seconds = runs.data_seconds + runs.bench_seconds["gap"] + run.seconds + time.perf_counter() - t0
    ok = run.probe >= 0.90 and random_acc <= 0.50 and seconds < 30 * 60
    detail = (f"trained {run.probe:.4f} (bar 0.90), random-init {random_acc:.4f} (bar 0.50), "
              f"mean-coordinate baseline {baseline:.4f}, chance 0.25")
    assert report_criterion(8, "Probe accuracy", ok, detail, seconds)


# -- 9: determinism ------------------------------------------------------------------


def test_criterion_09_determinism(tmp_path, report_criterion):
    cfg = RunConfig().replace(data__per_class=8, data__data_dir="data", training__epochs=1,
                              training__warmup_epochs=0)
    outputs = []
    t0 = time.perf_counter()
    for name in ("a", "b"):
        work = tmp_path / name
        work.mkdir()
        (work / "smoke.ini").write_text(cfg.validate().to_text())
        proc = subprocess.run([sys.executable, "-m", "pointgac", "--threads", "1", "pretrain",
                               "--config", "smoke.ini", "--out", "run"],
                              cwd=work, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append(work / "run")
    seconds = time.perf_counter() - t0
    names = sorted(p.name for p in outputs[0].iterdir())
    same = {n: (outputs[0] / n).read_bytes() == (outputs[1] / n).read_bytes() for n in names}
    key_files = same.get("checkpoint.ckpt", False) and same.get("metrics.csv", False)
    ok = key_files and all(same.values()) and seconds < 5 * 60
    detail = ", ".join(f"{n} {'identical' if v else 'DIFFERENT'}" for n, v in same.items())
    assert report_criterion(9, "Single-thread determinism", ok, detail, seconds)


# -- 10: grouping ablation -----------------------------------------------------------


def test_criterion_10_gap_vs_knn(runs, report_criterion):
    seeds = (0, 1, 2)
    gap = [runs.run("gap", seed=s) for s in seeds]
    knn = [runs.run("knn", seed=s) for s in seeds]
    g = [r.probe for r in gap]
    k = [r.probe for r in knn]
    seconds = sum(r.seconds for r in gap + knn) + runs.bench_seconds["knn"] + runs.bench_seconds["gap"]
    ok = float(np.median(g)) >= float(np.median(k)) and seconds < 90 * 60
    detail = (f"gap probes {[round(x, 4) for x in g]} (median {np.median(g):.4f}) vs "
              f"knn {[round(x, 4) for x in k]} (median {np.median(k):.4f})")
    assert report_criterion(10, "Geometry-aware vs KNN grouping", ok, detail, seconds)
