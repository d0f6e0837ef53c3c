import numpy as np
import pytest

from helpers import intr, random_quats, random_scene
from streamsplat.core import CameraPose, InvalidArgumentError
from streamsplat.loss import (DivergenceError, GaussianParams, LossWeights, StageTerms, UndefinedLossError,
                              loss_lang, loss_lang_grad, loss_pose, loss_render, loss_render_grad, loss_total,
                              optimize_scene, pose_vector, stage_loss, sum_objectives, mse_objective,
                              lang_objective, finite_diff_check)
from streamsplat.render import rasterize


def test_default_weights():
    w = LossWeights()
    assert (w.aux, w.pose, w.render, w.lang) == (0.8, 1.0, 1.0, 0.5)
    with pytest.raises(InvalidArgumentError):
        LossWeights(pose=-1.0)


def test_loss_total_unit_fixtures():
    one, zero = StageTerms(1.0, 1.0, 1.0), StageTerms()
    assert loss_total(one, zero) == 2.5
    assert loss_total(zero, one) == 2.0
    assert loss_total((1, 1, 1), (1, 1, 1)) == 4.5
    assert stage_loss((2, 0, 2)) == 3.0
    with pytest.raises(InvalidArgumentError):
        loss_total((np.nan, 0, 0), zero)


def test_loss_pose_sign_invariant(rng):
    q = random_quats(rng, 1)[0]
    a = CameraPose.from_quat_trans(q, [1, 2, 3])
    b = CameraPose.from_quat_trans(-q, [1, 2, 3])
    assert loss_pose(a, b) == pytest.approx(0.0, abs=1e-24)
    c = CameraPose.from_quat_trans(q, [1, 2, 4])
    assert loss_pose(a, c) == pytest.approx(1.0)
    assert pose_vector(a).shape == (7,)


def test_loss_render_and_grad(rng):
    a, b = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5, 3))
    v, g = loss_render_grad(a, b)
    assert v == pytest.approx(np.mean((a - b) ** 2)) == loss_render(a, b)
    h = 1e-6
    e = np.zeros_like(a)
    e[1, 2, 0] = h
    assert g[1, 2, 0] == pytest.approx((loss_render(a + e, b) - loss_render(a - e, b)) / (2 * h), rel=1e-6)
    with pytest.raises(InvalidArgumentError):
        loss_render(a, b[:2])


def test_loss_lang_masks_and_zero_vectors():
    gt = np.zeros((1, 3, 2))
    gt[0, 0] = [1, 0]
    gt[0, 1] = [0, 2]
    r = np.zeros((1, 3, 2))
    r[0, 0] = [3, 0]      # cos 1
    r[0, 1] = [0, 0]      # zero rendered vector: cos 0
    r[0, 2] = [5, 5]      # gt zero: masked out
    v, g = loss_lang_grad(r, gt)
    assert v == pytest.approx(-0.5)
    assert not g[0, 1].any() and not g[0, 2].any()
    with pytest.raises(UndefinedLossError):
        loss_lang(r, np.zeros_like(gt))


def test_loss_lang_grad_fd(rng):
    r, gt = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    _, g = loss_lang_grad(r, gt)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 2, 3), (2, 1, 1)]:
        e = np.zeros_like(r)
        e[idx] = h
        fd = (loss_lang(r + e, gt) - loss_lang(r - e, gt)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_sum_objectives_fd(rng):
    s = random_scene(rng, 6, K=3)
    k = intr(12)
    gt = rasterize(random_scene(rng, 6, K=3), CameraPose.identity(), k)
    obj = sum_objectives(mse_objective(gt.color), lang_objective(gt.feature), weights=[1.0, 0.5])
    assert finite_diff_check(s, CameraPose.identity(), k, obj).passed()


def test_params_project_valid():
    p = GaussianParams(np.zeros((2, 3)), np.array([[0.0, 0, 0, 0], [-2.0, 0, 0, 0]]), np.array([[-1.0] * 3] * 2),
                       np.array([2.0, -1.0]), np.array([[1.5, -0.5, 0.5]] * 2), np.zeros((2, 1)))
    p.project_valid()
    assert np.array_equal(p.rot, [[1, 0, 0, 0], [1, 0, 0, 0]])
    assert p.scale.min() == 1e-4 and list(p.opacity) == [1.0, 0.0]
    assert p.color.min() == 0.0 and p.color.max() == 1.0


def _tiny_problem(rng, n=30, size=16):
    target = random_scene(rng, 15, K=2, spread=0.6, depth=(2.0, 3.0))
    k = intr(size)
    cams = [CameraPose.identity(), CameraPose.look_at([0.3, 0, 0], [0, 0, 2.5])]
    imgs = [rasterize(target, c, k).color for c in cams]
    init = random_scene(rng, n, K=2, spread=0.6, depth=(2.0, 3.0), opacity=(0.4, 0.6))
    return init, cams, imgs, k


def test_optimize_monotone_and_improves(rng):
    init, cams, imgs, k = _tiny_problem(rng)
    res = optimize_scene(init, cams, imgs, k, steps=40)
    totals = [c["total"] for c in res.curve]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert totals[-1] < 0.5 * totals[0]
    assert res.stats["accepted"] > 0 and res.steps <= 40


def test_optimize_with_features(rng):
    init, cams, imgs, k = _tiny_problem(rng)
    feats = [np.ones((16, 16, 2))] * 2
    res = optimize_scene(init, cams, imgs, k, steps=5, features=feats)
    assert res.curve[-1]["lang"] <= res.curve[0]["lang"] + 1e-12


def test_optimize_early_stop(rng):
    init, cams, imgs, k = _tiny_problem(rng)
    res = optimize_scene(init, cams, imgs, k, steps=500, stop_render=1.0)
    assert res.steps == 1


def test_optimize_validation(rng):
    init, cams, imgs, k = _tiny_problem(rng)
    with pytest.raises(InvalidArgumentError):
        optimize_scene(init, cams, imgs[:1], k)
    with pytest.raises(DivergenceError):
        optimize_scene(init, cams, [np.full_like(imgs[0], np.nan)] * 2, k, steps=1)
