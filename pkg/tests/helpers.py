"""Random scene generators shared by the test modules."""
import numpy as np

from streamsplat.core import CameraPose, GaussianScene, Intrinsics


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n, K=4, spread=1.0, depth=(1.5, 4.0), scale=(0.03, 0.3), opacity=(0.05, 0.95),
                 lang=None, voxel_size=0.05):
    """``n`` Gaussians in front of an identity camera (looking down +z)."""
    mu = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                          rng.uniform(*depth, n)])
    if lang is None:
        lang = rng.normal(size=(n, K))
    return GaussianScene.from_arrays(mu, random_quats(rng, n), rng.uniform(*scale, (n, 3)),
                                     rng.uniform(*opacity, n), rng.uniform(0, 1, (n, 3)), lang,
                                     voxel_size=voxel_size)


def camera(rng=None, jitter=0.0):
    if rng is None or jitter == 0.0:
        return CameraPose.identity()
    eye = rng.normal(scale=jitter, size=3)
    return CameraPose.look_at(eye, [0.0, 0.0, 3.0])


def intr(size=32, fov=60.0):
    return Intrinsics.from_fov(size, size, fov)
