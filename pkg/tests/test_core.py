import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from helpers import random_quats, random_scene
from streamsplat.core import (CameraPose, GaussianPrimitive, GaussianScene, Intrinsics, InvalidArgumentError,
                              axis_angle_to_rotmat, canonical_quat, covariance_from_rs, quat_to_rotmat,
                              rotmat_to_quat, transform_points, voxel_key, voxel_keys)

quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)


def test_quat_to_rotmat_matches_scipy(rng):
    for q in random_quats(rng, 50):
        # scipy stores (x, y, z, w)
        ref = Rotation.from_quat(np.r_[q[1:], q[0]]).as_matrix()
        assert np.allclose(quat_to_rotmat(q), ref, atol=1e-12)


@given(quats)
def test_quat_roundtrip(q):
    q = np.array(q) / np.linalg.norm(q)
    back = rotmat_to_quat(quat_to_rotmat(q))
    # q and -q are the same rotation; canonical form is ambiguous at w = 0
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9
    assert canonical_quat(back)[0] >= 0


def test_quat_to_rotmat_rejects_non_unit():
    with pytest.raises(InvalidArgumentError):
        quat_to_rotmat([1.0, 1.0, 0.0, 0.0])


def test_axis_angle():
    R = axis_angle_to_rotmat([0, 0, 1], np.pi / 2)
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0])


def test_covariance_is_rsst_r(rng):
    q = random_quats(rng, 1)[0]
    s = np.array([0.1, 0.2, 0.3])
    R = quat_to_rotmat(q)
    assert np.allclose(covariance_from_rs(q, s), R @ np.diag(s ** 2) @ R.T, atol=1e-15)


def test_pose_compose_inverse(rng):
    a = CameraPose.from_quat_trans(random_quats(rng, 1)[0], rng.normal(size=3))
    b = CameraPose.from_quat_trans(random_quats(rng, 1)[0], rng.normal(size=3))
    assert np.allclose(a.compose(b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)
    assert np.allclose(a.compose(a.inverse()).as_matrix(), np.eye(4), atol=1e-12)
    p = rng.normal(size=(5, 3))
    assert np.allclose(transform_points(a, p), p @ a.rotation.T + a.translation)


def test_pose_validation():
    with pytest.raises(InvalidArgumentError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        CameraPose(np.eye(3), [0, 0, np.nan])


def test_look_at_points_z_at_target():
    cam = CameraPose.look_at([0, 0, -2], [0, 0, 0])
    assert np.allclose(cam.rotation[:, 2], [0, 0, 1])
    # y axis points down in world (OpenCV convention with y-up world)
    assert cam.rotation[1, 1] < 0 or np.allclose(cam.rotation[:, 1], [0, 1, 0])


def test_intrinsics_from_fov():
    k = Intrinsics.from_fov(32, 32, 90.0)
    assert k.cx == 15.5 and np.isclose(k.fx, 16.0)
    with pytest.raises(InvalidArgumentError):
        Intrinsics(0.0, 1.0, 0, 0, 4, 4)


def test_voxel_key_floor():
    assert voxel_key([0.049, -0.001, 0.1], 0.05) == (0, -1, 2)
    pts = np.array([[0.049, -0.001, 0.1], [0.2, 0.2, 0.2]])
    assert [tuple(k) for k in voxel_keys(pts, 0.05)] == [(0, -1, 2), (4, 4, 4)]


def test_primitive_validation():
    ok = dict(mu=np.zeros(3), rot=np.array([1.0, 0, 0, 0]), scale=np.ones(3) * 0.1, opacity=0.5,
              color=np.full(3, 0.5), lang=np.zeros(4), confidence=1.0)
    GaussianPrimitive(**ok)
    for k, v in [("opacity", 1.5), ("scale", -np.ones(3)), ("color", np.full(3, 2.0)),
                 ("rot", np.array([2.0, 0, 0, 0])), ("confidence", 0.0)]:
        with pytest.raises(InvalidArgumentError):
            GaussianPrimitive(**{**ok, k: v})


def test_scene_append_remove_keeps_index(rng):
    s = random_scene(rng, 200, voxel_size=0.2)
    s.check_index()
    before = {tuple(np.round(m, 12)) for m in s.mu}
    drop = sorted(rng.choice(200, 60, replace=False).tolist())
    kept = {tuple(np.round(m, 12)) for i, m in enumerate(s.mu) if i not in drop}
    s.remove(drop)
    s.check_index()
    assert len(s) == 140
    assert {tuple(np.round(m, 12)) for m in s.mu} == kept
    assert kept < before


def test_scene_neighbors_are_voxel_members(rng):
    s = random_scene(rng, 300, spread=0.3, depth=(0.0, 0.3), voxel_size=0.1)
    for i in range(0, 300, 37):
        key = voxel_key(s.mu[i], s.voxel_size)
        nb = s.neighbors(key)
        assert i in nb
        assert all(voxel_key(s.mu[j], s.voxel_size) == key for j in nb)


def test_scene_copy_is_independent(rng):
    s = random_scene(rng, 10)
    c = s.copy()
    c.remove([0])
    assert len(s) == 10 and len(c) == 9
    assert np.array_equal(s.primitive(3).mu, s.mu[3])


def test_scene_rejects_bad_rows():
    s = GaussianScene(K=2)
    with pytest.raises(InvalidArgumentError):
        s.append(np.zeros((1, 3)), np.zeros((1, 4)), np.ones((1, 3)), [0.5], np.zeros((1, 3)),
                 np.zeros((1, 2)), [1.0])
    with pytest.raises(IndexError):
        s.remove([0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 60), st.integers(0, 59))
def test_scene_remove_property(seed, n, k):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, n, voxel_size=0.3)
    idx = rng.choice(n, min(k, n), replace=False).tolist()
    s.remove(idx)
    s.check_index()
    assert len(s) == n - len(idx)
