"""Online k-means codebook on a toy stream, with and without maintenance.

Run:  python walkthroughs/02_codebook_maintenance.py

Features come from four tight clusters, but the codebook starts from random
vectors far away from most of them, so plain nearest-neighbour updates leave
many codes dead. The maintenance step pulls rarely used codes toward the
features they resemble most.
"""
import numpy as np

from pointgac import codebook as cb

K, D, STEPS, EPOCHS = 32, 8, 25, 6


def stream(rng):
    centers = np.eye(D)[:4] * 3
    while True:
        idx = rng.integers(0, 4, 64)
        yield centers[idx] + 0.3 * rng.standard_normal((64, D))


def run(mode):
    rng = np.random.default_rng(0)
    book = cb.init_codebook(rng.standard_normal((K, D)) * 2, K, rng)
    feats = stream(np.random.default_rng(1))
    dead = []
    for _ in range(EPOCHS):
        for _ in range(STEPS):
            f = next(feats)
            cb.kmeans_update(book, f, cb.nearest_code(f, book))
        dead.append(cb.dead_fraction(book, 0.0, window=True))
        if mode != "off":
            cb.maintenance_step(book, f, mode=mode, rng=rng)
        book.decay_counts(0.5)
        book.reset_window()
    return dead


for mode in ("off", "random", "meaningful"):
    print(f"{mode:10s} dead fraction per epoch: " + " ".join(f"{d:.2f}" for d in run(mode)))

# The blend weight is a sigmoid of how far a code's count sits from the mean count.
alpha, eps, mean = cb.maintenance_weights(np.array([0.0, 2.0, 10.0, 40.0]))
print(f"counts 0, 2, 10, 40 -> blend weights {np.round(alpha, 3)} (slope {eps:.3f}, mean count {mean})")
