import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from helpers import random_scene
from streamsplat.core import GaussianScene, InvalidArgumentError, voxel_key
from streamsplat.fuse import (FusionMlp, FusionNeighborhood, attribute_vector, decode_attributes, fuse_center,
                              fuse_features, gather_neighborhood, integrate_frame, integrate_primitives)


def _oracle_center(x, c, xs, cs):
    num = c * np.asarray(x, float)
    den = c
    for xi, ci in zip(xs, cs):
        num = num + ci * np.asarray(xi, float)
        den += ci
    return num / den


def _in_hull(p, pts):
    pts = np.asarray(pts)
    n = len(pts)
    res = linprog(np.zeros(n), A_eq=np.vstack([pts.T, np.ones(n)]), b_eq=np.r_[p, 1.0],
                  bounds=[(0, None)] * n, method="highs")
    return res.status == 0


def test_fuse_center_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 8))
        xs, cs = rng.normal(size=(n, 3)), rng.uniform(0.1, 5, n)
        x, c = rng.normal(size=3), float(rng.uniform(0.1, 5))
        got = fuse_center(x, c, FusionNeighborhood(list(range(n)), cs, xs))
        assert np.abs(got - _oracle_center(x, c, xs, cs)).max() <= 1e-12


def test_fuse_center_no_neighbours():
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(fuse_center(x, 1.0, FusionNeighborhood([], [])), x)


def test_fuse_center_validation():
    with pytest.raises(InvalidArgumentError):
        fuse_center(np.zeros(3), 0.0, FusionNeighborhood([], []))
    with pytest.raises(InvalidArgumentError):
        FusionNeighborhood([0], [-1.0], np.zeros((1, 3)))


def test_identity_mlp_exact(rng):
    F = 9
    mlp = FusionMlp.identity(F)
    for _ in range(100):
        g = rng.normal(size=F) * 10 ** rng.uniform(-6, 6)
        nb = FusionNeighborhood([0, 1], [1.0, 2.0], np.zeros((2, 3)), rng.normal(size=(2, F)))
        assert np.array_equal(fuse_features(g, nb, mlp), g)


def test_mlp_shape_checks():
    with pytest.raises(InvalidArgumentError):
        FusionMlp(np.zeros((4, 5)), np.zeros(4), np.zeros((2, 4)), np.zeros(2))
    mlp = FusionMlp.random(3)
    with pytest.raises(InvalidArgumentError):
        mlp(np.zeros(5))


def test_attribute_pack_unpack(rng):
    s = random_scene(rng, 6, K=4)
    g = attribute_vector(s.scale, s.rot, s.opacity, s.color, s.lang)
    assert g.shape == (6, 15)
    scale, rot, op, col, lang = decode_attributes(g, 4, s.rot)
    for a, b in [(scale, s.scale), (rot, s.rot), (op, s.opacity), (col, s.color), (lang, s.lang)]:
        assert np.array_equal(a, b)


def test_decode_projects_to_valid_set():
    g = np.array([[-1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.5, -0.2, 0.5, 3.0, 7.0]])
    scale, rot, op, col, lang = decode_attributes(g, 1, np.array([[1.0, 0, 0, 0]]))
    assert scale.min() > 0 and np.allclose(rot, [[1, 0, 0, 0]])
    assert op[0] == 1.0 and col.min() >= 0 and col.max() <= 1 and lang[0, 0] == 7.0


def test_integrate_self_is_idempotent(rng):
    # one primitive per voxel, fused with an identical copy under the identity MLP
    n = 40
    mu = np.column_stack([np.arange(n) * 0.5 + 0.01, np.zeros(n) + 0.01, np.zeros(n) + 0.01])
    s = random_scene(rng, n, K=3)
    s = GaussianScene.from_arrays(mu, s.rot, s.scale, s.opacity, s.color, s.lang, voxel_size=0.1)
    mlp = FusionMlp.identity(11 + 3)
    scene = s.copy()
    rep = integrate_frame(scene, s, mlp)
    assert rep.merges == n and rep.absorbed == n and len(scene) == n
    order = np.argsort(scene.mu[:, 0])
    for f in ("mu", "rot", "scale", "opacity", "color", "lang"):
        assert np.array_equal(getattr(scene, f)[order], getattr(s, f)), f
    assert np.array_equal(scene.confidence[order], 2 * s.confidence)


def _merge_trial(rng, K=2):
    old = random_scene(rng, int(rng.integers(1, 30)), K=K, spread=0.2, depth=(0.0, 0.2), voxel_size=0.1)
    old = GaussianScene.from_arrays(old.mu, old.rot, old.scale, old.opacity, old.color, old.lang,
                                    rng.uniform(0.1, 3, len(old)), voxel_size=0.1)
    new = random_scene(rng, int(rng.integers(1, 30)), K=K, spread=0.2, depth=(0.0, 0.2), voxel_size=0.1)
    new = GaussianScene.from_arrays(new.mu, new.rot, new.scale, new.opacity, new.color, new.lang,
                                    rng.uniform(0.1, 3, len(new)), voxel_size=0.1)
    return old, new


def test_merge_invariants_randomized(rng):
    mlp = FusionMlp.random(11 + 2, seed=3)
    merges = 0
    while merges < 1000:
        old, new = _merge_trial(rng)
        before = old.copy()
        scene = old.copy()
        rep = integrate_frame(scene, new, mlp)
        scene.check_index()
        # total confidence is conserved
        assert scene.confidence.sum() == pytest.approx(before.confidence.sum() + new.confidence.sum(), rel=1e-12)
        assert len(scene) == len(before) - rep.absorbed + len(new)
        for j, nbrs in rep.merged_into:
            key = voxel_key(new.mu[j], 0.1)
            # the fused centre lies in the convex hull of the inputs
            pts = np.vstack([new.mu[j], before.mu[nbrs]])
            fused = _oracle_center(new.mu[j], new.confidence[j], before.mu[nbrs], before.confidence[nbrs])
            hit = np.flatnonzero(np.all(np.isclose(scene.mu, fused, atol=1e-12, rtol=0), axis=1))
            assert len(hit) >= 1
            assert _in_hull(fused, pts)
            assert all(voxel_key(before.mu[i], 0.1) == key for i in nbrs)
            merges += 1


def test_incoming_never_fuse_with_each_other(rng):
    scene = GaussianScene(K=1, voxel_size=1.0)
    new = random_scene(rng, 5, K=1, spread=0.1, depth=(0.2, 0.3), voxel_size=1.0)
    new = GaussianScene.from_arrays(new.mu + [0.5, 0.5, 0.0], new.rot, new.scale, new.opacity, new.color,
                                    new.lang, voxel_size=1.0)
    rep = integrate_frame(scene, new, FusionMlp.identity(12))
    assert rep.merges == 0 and len(scene) == 5
    rep = integrate_frame(scene, new, FusionMlp.identity(12))
    # all five old ones share the voxel: one claimer absorbs them, the other four append
    assert rep.merges == 1 and rep.absorbed == 5 and len(scene) == 5


def test_gather_neighborhood(rng):
    s = random_scene(rng, 50, spread=0.2, depth=(0.0, 0.2), voxel_size=0.1)
    nb = gather_neighborhood(s, s.mu[0])
    assert 0 in nb.indices and nb.features.shape == (len(nb), 11 + s.K)


def test_integrate_primitives_wrapper(rng):
    s = random_scene(rng, 3, K=2)
    scene = GaussianScene(K=2)
    rep = integrate_primitives(scene, s.primitives, FusionMlp.identity(13))
    assert rep.count == 3


def test_k_mismatch(rng):
    with pytest.raises(InvalidArgumentError):
        integrate_frame(GaussianScene(K=2), random_scene(rng, 2, K=3), FusionMlp.identity(13))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_confidence_conservation_property(seed):
    rng = np.random.default_rng(seed)
    old, new = _merge_trial(rng, K=1)
    total = old.confidence.sum() + new.confidence.sum()
    integrate_frame(old, new, FusionMlp.random(12, seed=seed % 97))
    assert old.confidence.sum() == pytest.approx(total, rel=1e-12)
