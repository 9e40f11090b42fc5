"""Patch tokens: mini point-set network with max pooling, plus center MLP."""
from dataclasses import dataclass

import numpy as np

from .diffcore import autograd as ag
from .diffcore.transformer import init_linear, linear

POINT_HIDDEN = 64


@dataclass
class PatchTokens:
    E: ag.Tensor
    PE: ag.Tensor
    F: ag.Tensor


def normalize_patches(patches, cloud):
    """Member coordinates of each patch minus that patch's center."""
    return [cloud.points[idx] - patches.centers[j] for j, idx in enumerate(patches.patch_points)]


def pad_patches(centered, size=None):
    """Stack ragged (n_j, 3) patches into (L, P, 3).

    Short patches are padded by repeating their own first point, so a max
    over the padded axis equals the max over the real members.
    """
    size = size or max(len(p) for p in centered)
    out = np.empty((len(centered), size, 3))
    for j, p in enumerate(centered):
        m = len(p)
        if m > size:
            raise ValueError(f"patch {j} has {m} points, more than pad size {size}")
        out[j, :m] = p
        out[j, m:] = p[0]
    return out


def batch_patches(items):
    """Pad a list of ``(patches, cloud)`` pairs into (B, L, P, 3) and (B, L, 3)."""
    centered = [normalize_patches(ps, cloud) for ps, cloud in items]
    size = max(len(p) for group in centered for p in group)
    coords = np.stack([pad_patches(group, size) for group in centered])
    centers = np.stack([ps.centers for ps, _ in items])
    return coords, centers


def init_embedding_params(params, rng, dim, hidden=POINT_HIDDEN):
    init_linear(params, rng, "pn.fc1", 3, hidden)
    init_linear(params, rng, "pn.fc2", 2 * hidden, dim)
    init_linear(params, rng, "pe.fc1", 3, dim)
    init_linear(params, rng, "pe.fc2", dim, dim)
    return params


def mini_pointnet_forward(coords, params):
    """(..., L, P, 3) centered patch points -> (..., L, D) patch embeddings."""
    x = ag.as_tensor(coords)
    h1 = ag.silu(linear(x, params, "pn.fc1"))
    pooled = ag.max_(h1, axis=-2)
    tiled = ag.broadcast_to(ag.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])), h1.shape)
    h2 = ag.silu(linear(ag.concat([h1, tiled], axis=-1), params, "pn.fc2"))
    return ag.max_(h2, axis=-2)


def positional_embedding(centers, params):
    return linear(ag.silu(linear(ag.as_tensor(centers), params, "pe.fc1")), params, "pe.fc2")


def embed(coords, centers, params):
    E = mini_pointnet_forward(coords, params)
    PE = positional_embedding(centers, params)
    return PatchTokens(E, PE, E + PE)
