import numpy as np
import pytest

from pointgac.diffcore import Tensor, grad_check
from pointgac.embedding import (
    batch_patches,
    embed,
    init_embedding_params,
    mini_pointnet_forward,
    normalize_patches,
    pad_patches,
    positional_embedding,
)
from pointgac.geometry import PointCloud
from pointgac.transport import PartitionConfig, partition_pipeline


def params(dim=8, hidden=6, seed=0):
    return init_embedding_params({}, np.random.default_rng(seed), dim, hidden)


def silu(x):
    return x / (1 + np.exp(-x))


def h_matrix_oracle(points, patch_of, P):
    """Pool through an explicit N x N same-patch matrix, one row per point."""
    n = len(points)
    H = (patch_of[:, None] == patch_of[None, :])
    w1, b1 = P["pn.fc1.w"].data, P["pn.fc1.b"].data
    w2, b2 = P["pn.fc2.w"].data, P["pn.fc2.b"].data
    h1 = silu(points @ w1 + b1)
    pooled1 = np.stack([h1[H[i]].max(axis=0) for i in range(n)])
    h2 = silu(np.concatenate([h1, pooled1], axis=1) @ w2 + b2)
    pooled2 = np.stack([h2[H[i]].max(axis=0) for i in range(n)])
    L = patch_of.max() + 1
    # every row of a patch pools to the same vector; take the first member's
    return np.stack([pooled2[np.flatnonzero(patch_of == j)[0]] for j in range(L)])


def test_list_pooling_equals_h_matrix_two_patches():
    P = params()
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((7, 3))
    patch_of = np.array([0, 1, 0, 0, 1, 1, 0])
    groups = [pts[patch_of == j] for j in range(2)]
    E = mini_pointnet_forward(pad_patches(groups), P).data
    # BLAS picks kernels by row count, so equality holds to rounding only
    np.testing.assert_allclose(E, h_matrix_oracle(pts, patch_of, P), rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_list_pooling_equals_h_matrix_random(seed):
    P = params(seed=seed)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 129))
    L = int(rng.integers(1, 9))
    patch_of = np.concatenate([np.arange(L), rng.integers(0, L, n - L)])
    pts = rng.standard_normal((n, 3))
    groups = [pts[patch_of == j] for j in range(L)]
    E = mini_pointnet_forward(pad_patches(groups), P).data
    np.testing.assert_allclose(E, h_matrix_oracle(pts, patch_of, P), rtol=1e-14, atol=1e-15)


def test_patch_of_identical_points_equals_single_point():
    P = params()
    p = np.array([[0.2, -0.1, 0.4]])
    one = mini_pointnet_forward(pad_patches([p]), P).data
    many = mini_pointnet_forward(pad_patches([np.repeat(p, 5, axis=0)]), P).data
    np.testing.assert_allclose(one, many, rtol=1e-14, atol=1e-15)


def test_permutation_within_patch_is_exact():
    P = params()
    pts = np.random.default_rng(3).standard_normal((9, 3))
    perm = np.random.default_rng(4).permutation(9)
    a = mini_pointnet_forward(pad_patches([pts]), P).data
    b = mini_pointnet_forward(pad_patches([pts[perm]]), P).data
    np.testing.assert_array_equal(a, b)


def test_padding_does_not_change_embedding():
    P = params()
    pts = np.random.default_rng(5).standard_normal((4, 3))
    a = mini_pointnet_forward(pad_patches([pts]), P).data
    b = mini_pointnet_forward(pad_patches([pts], size=11), P).data
    np.testing.assert_array_equal(a, b)


def test_pad_rejects_oversized_patch():
    with pytest.raises(ValueError):
        pad_patches([np.zeros((5, 3))], size=3)


def test_normalize_singleton_and_square():
    cloud = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [5, 5, 5]]))

    class Patches:
        centers = np.array([[0.5, 0.5, 0.0], [5.0, 5.0, 5.0]])
        patch_points = [np.array([0, 1, 2, 3]), np.array([4])]

    square, single = normalize_patches(Patches, cloud)
    np.testing.assert_allclose(square.sum(axis=0), 0.0, atol=1e-15)
    np.testing.assert_array_equal(single, np.zeros((1, 3)))


def test_positional_embedding_equal_centers_and_zero_weights():
    P = params()
    c = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [-1.0, 0.0, 2.0]])
    pe = positional_embedding(c, P).data
    np.testing.assert_array_equal(pe[0], pe[1])
    for name in ("pe.fc1.w", "pe.fc2.w"):
        P[name].data[:] = 0.0
    pe = positional_embedding(c, P).data
    assert (pe == pe[0]).all()
    np.testing.assert_allclose(pe[0], P["pe.fc2.b"].data)


def test_translation_changes_only_positional_part():
    P = params()
    pts = np.random.default_rng(6).standard_normal((64, 3))
    labels = np.zeros(64, dtype=np.int64)
    ps = partition_pipeline(PointCloud(pts, labels), 4, PartitionConfig())
    moved = PointCloud(pts + np.array([3.0, -1.0, 0.5]), labels)
    ps2 = partition_pipeline(moved, 4, PartitionConfig())
    c1, k1 = batch_patches([(ps, PointCloud(pts, labels))])
    c2, k2 = batch_patches([(ps2, moved)])
    t1, t2 = embed(c1, k1, P), embed(c2, k2, P)
    np.testing.assert_allclose(t1.E.data, t2.E.data, atol=1e-12)
    assert not np.allclose(t1.PE.data, t2.PE.data)
    np.testing.assert_array_equal(t1.F.data, t1.E.data + t1.PE.data)


def test_embedding_gradients_match_finite_differences():
    P = params(dim=6, hidden=5, seed=7)
    for p in P.values():
        p.requires_grad = True
    rng = np.random.default_rng(8)
    coords = rng.standard_normal((2, 3, 4, 3)) * 0.3
    centers = rng.standard_normal((2, 3, 3))
    w = Tensor(rng.standard_normal((2, 3, 6)))
    report = grad_check(lambda: (embed(coords, centers, P).F * w).sum(), P, tolerance=1e-6)
    assert report.passed, report.format()
