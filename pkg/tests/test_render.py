import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import camera, intr, random_scene
from streamsplat.core import CameraPose, GaussianScene, Intrinsics, InvalidArgumentError
from streamsplat.loss import finite_diff_check, lang_objective, linear_objective, mse_objective
from streamsplat.render import (ALPHA_MAX, brute_force_render, project_gaussian, rasterize, rasterize_backward,
                                support_footprint)


def _single(mu, scale=0.1, opacity=0.8, color=(1.0, 0.5, 0.25), K=2):
    return GaussianScene.from_arrays([mu], [[1.0, 0, 0, 0]], [[scale] * 3], [opacity], [color], [[1.0] * K])


def _assert_match(a, b, tol=1e-6):
    for f in ("color", "feature", "depth", "alpha"):
        assert np.abs(getattr(a, f) - getattr(b, f)).max() <= tol, f


def test_empty_scene_renders_black():
    t = rasterize(GaussianScene(K=3), CameraPose.identity(), intr(8))
    assert t.color.shape == (8, 8, 3) and t.feature.shape == (8, 8, 3)
    assert not t.color.any() and not t.alpha.any()


def test_single_gaussian_centre_pixel():
    # odd image with the principal point on a pixel centre
    k = Intrinsics(20.0, 20.0, 8.0, 8.0, 17, 17)
    t = rasterize(_single([0, 0, 2.0], opacity=0.6), CameraPose.identity(), k)
    # at the exact centre q = 0 so alpha equals the opacity
    assert t.alpha[8, 8] == pytest.approx(0.6, abs=1e-12)
    assert np.allclose(t.color[8, 8], 0.6 * np.array([1.0, 0.5, 0.25]))
    assert t.depth[8, 8] == pytest.approx(0.6 * 2.0)


def test_projection_lowpass_and_culling():
    k = intr(16)
    g = _single([0, 0, 2.0], scale=0.01).primitive(0)
    p = project_gaussian(g, CameraPose.identity(), k)
    f = k.fx / 2.0
    assert np.allclose(p.cov2d, np.eye(2) * (f * f * 1e-4 + 0.3))
    behind = _single([0, 0, -1.0]).primitive(0)
    assert project_gaussian(behind, CameraPose.identity(), k) is None
    assert project_gaussian(_single([0, 0, 0.005]).primitive(0), CameraPose.identity(), k) is None


def test_alpha_clamped():
    k = Intrinsics(20.0, 20.0, 8.0, 8.0, 17, 17)
    t = rasterize(_single([0, 0, 2.0], opacity=1.0), CameraPose.identity(), k)
    assert t.alpha.max() == pytest.approx(ALPHA_MAX)


def test_front_to_back_order():
    k = Intrinsics(20.0, 20.0, 8.0, 8.0, 17, 17)
    near = GaussianScene.from_arrays([[0, 0, 2.0], [0, 0, 3.0]], [[1.0, 0, 0, 0]] * 2, [[0.2] * 3] * 2,
                                     [0.5, 0.5], [[1.0, 0, 0], [0, 0, 1.0]], [[0.0]] * 2)
    c = rasterize(near, CameraPose.identity(), k).color[8, 8]
    # near red composited first: 0.5 red, then 0.5 * 0.5 blue (up to the exp falloff, which is 1 at centre)
    assert c[0] == pytest.approx(0.5, abs=1e-9) and c[2] == pytest.approx(0.25, abs=1e-9)


def test_rasterize_matches_oracle_small(rng):
    for _ in range(10):
        s = random_scene(rng, int(rng.integers(1, 80)))
        cam = camera(rng, 0.3)
        _assert_match(rasterize(s, cam, intr()), brute_force_render(s, cam, intr()), 1e-6)


def test_tile_boundaries_non_multiple(rng):
    k = Intrinsics(25.0, 25.0, 18.3, 9.7, 37, 21)
    s = random_scene(rng, 60)
    _assert_match(rasterize(s, CameraPose.identity(), k), brute_force_render(s, CameraPose.identity(), k))


def test_dense_pile_early_stop(rng):
    # many opaque primitives stacked on the axis: early termination must stay below tolerance
    n = 150
    s = random_scene(rng, n, spread=0.05, opacity=(0.9, 1.0), scale=(0.2, 0.4))
    _assert_match(rasterize(s, CameraPose.identity(), intr()), brute_force_render(s, CameraPose.identity(), intr()))


def test_constant_lang_shares_weights(rng):
    w = rng.normal(size=5)
    s = random_scene(rng, 40, K=5, lang=np.tile(w, (40, 1)))
    t = rasterize(s, camera(rng, 0.2), intr())
    assert np.abs(t.feature - t.alpha[..., None] * w).max() <= 1e-7


def test_support_footprint_counts(rng):
    s = random_scene(rng, 20)
    fp = support_footprint(s, CameraPose.identity(), intr())
    assert fp.shape == (20, 2)
    # a primitive contributing anywhere has a positive footprint
    solo = [rasterize(_keep(s, i), CameraPose.identity(), intr()).alpha for i in range(20)]
    for i, a in enumerate(solo):
        assert (fp[i, 0] > 0) == bool((a > 0).any())


def _keep(s, i):
    a = {k: v[i:i + 1] for k, v in s.arrays().items()}
    return GaussianScene.from_arrays(**a)


def test_backward_linear_objective_matches_fd(rng):
    s = random_scene(rng, 8, K=3)
    k = intr(16)
    H = W = 16
    obj = linear_objective(rng.normal(size=(H, W, 3)), rng.normal(size=(H, W, 3)),
                           rng.normal(size=(H, W)), rng.normal(size=(H, W)))
    rep = finite_diff_check(s, CameraPose.identity(), k, obj)
    assert rep.passed(), rep


def test_backward_shapes(rng):
    s = random_scene(rng, 5, K=3)
    g = rasterize_backward(s, CameraPose.identity(), intr(8), d_color=np.ones((8, 8, 3)))
    assert g.mu.shape == (5, 3) and g.rot.shape == (5, 4) and g.lang.shape == (5, 3)
    assert not g.lang.any()


def test_backward_rejects_bad_shape(rng):
    s = random_scene(rng, 3)
    with pytest.raises(InvalidArgumentError):
        rasterize_backward(s, CameraPose.identity(), intr(8), d_color=np.ones((4, 4, 3)))


@pytest.mark.parametrize("objective", ["mse", "lang"])
def test_gradients_against_fd(rng, objective):
    s = random_scene(rng, 10, K=4)
    k = intr(16)
    gt = rasterize(random_scene(rng, 10, K=4), CameraPose.identity(), k)
    obj = mse_objective(gt.color) if objective == "mse" else lang_objective(gt.feature)
    rep = finite_diff_check(s, CameraPose.identity(), k, obj)
    assert rep.passed(), rep
    assert sum(rep.checked.values()) > 0.8 * 10 * (3 + 4 + 3 + 1 + 3 + 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 60))
def test_rasterize_oracle_property(seed, n):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, n)
    cam = camera(rng, 0.5)
    _assert_match(rasterize(s, cam, intr(24)), brute_force_render(s, cam, intr(24)))
