"""Training objectives, a finite-difference harness and direct scene optimisation.

The render term is plain MSE (no perceptual term).  Each stage sums its
pose, render and language terms with per-term weights; the total adds the
relative stage to the global one, scaled by ``aux``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .core import CameraPose, GaussianScene, InvalidArgumentError, Intrinsics, canonical_quat
from .render import (RenderGradients, RenderTarget, active_set_signature, rasterize, rasterize_backward,
                     support_footprint)

GROUPS = RenderGradients.GROUPS
FEATURE_MASK_EPS = 1e-8


class UndefinedLossError(ValueError):
    """Every pixel was masked out, so the mean is undefined."""


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    aux: float = 0.8      # relative stage
    pose: float = 1.0
    render: float = 1.0
    lang: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidArgumentError(f"{f.name} must be a finite non-negative number, got {v}")


@dataclass(frozen=True)
class StageTerms:
    pose: float = 0.0
    render: float = 0.0
    lang: float = 0.0


def stage_loss(terms: StageTerms | Sequence[float], w: LossWeights = LossWeights()) -> float:
    pose, render, lang = (terms.pose, terms.render, terms.lang) if isinstance(terms, StageTerms) else terms
    return w.pose * pose + w.render * render + w.lang * lang


def loss_total(glob, relative, w: LossWeights = LossWeights()) -> float:
    """``global + aux * relative`` from per-stage (pose, render, lang) terms."""
    parts = [float(x) for t in (glob, relative)
             for x in ((t.pose, t.render, t.lang) if isinstance(t, StageTerms) else t)]
    if not all(math.isfinite(p) for p in parts):
        raise InvalidArgumentError("loss components must be finite")
    return stage_loss(glob, w) + w.aux * stage_loss(relative, w)


# ---------------------------------------------------------------------------
# individual terms


def pose_vector(pose: CameraPose, reference: CameraPose | None = None) -> np.ndarray:
    """(qw, qx, qy, qz, tx, ty, tz), quaternion canonical and sign-aligned to ``reference``."""
    q = canonical_quat(pose.quat())
    if reference is not None and np.dot(q, canonical_quat(reference.quat())) < 0:
        q = -q
    return np.concatenate([q, pose.translation])


def loss_pose(pred: CameraPose, gt: CameraPose) -> float:
    d = pose_vector(pred, gt) - pose_vector(gt)
    return float(d @ d)


def _color(x) -> np.ndarray:
    return x.color if isinstance(x, RenderTarget) else np.asarray(x, dtype=np.float64)


def loss_render(rendered, gt_image) -> float:
    a, b = _color(rendered), _color(gt_image)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def loss_render_grad(rendered, gt_image) -> tuple[float, np.ndarray]:
    a, b = _color(rendered), _color(gt_image)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    r = a - b
    return float(np.mean(r ** 2)), 2.0 * r / r.size


def loss_lang_grad(rendered_feature, gt_feature) -> tuple[float, np.ndarray]:
    """Mean negative cosine over pixels whose gt feature is non-zero, and its gradient.

    A rendered feature of zero length has no direction; such pixels count as
    cosine 0 with zero gradient.
    """
    r = rendered_feature
    r = r.feature if isinstance(r, RenderTarget) else np.asarray(r, dtype=np.float64)
    g = np.asarray(gt_feature, dtype=np.float64)
    if r.shape != g.shape:
        raise InvalidArgumentError(f"feature shapes differ: {r.shape} vs {g.shape}")
    gn = np.linalg.norm(g, axis=-1)
    rn = np.linalg.norm(r, axis=-1)
    mask = gn >= FEATURE_MASK_EPS
    n = int(mask.sum())
    if n == 0:
        raise UndefinedLossError("every ground-truth feature pixel is zero; the language loss is undefined")
    ok = mask & (rn > 0)
    rn_s = np.where(ok, rn, 1.0)
    gn_s = np.where(mask, gn, 1.0)
    dot = np.sum(r * g, axis=-1)
    cos = np.where(ok, dot / (rn_s * gn_s), 0.0)
    value = -float(cos[mask].sum()) / n
    grad = -(g / (rn_s * gn_s)[..., None] - (dot / (rn_s ** 3 * gn_s))[..., None] * r) / n
    grad[~ok] = 0.0
    return value, grad


def loss_lang(rendered_feature, gt_feature) -> float:
    return loss_lang_grad(rendered_feature, gt_feature)[0]


# ---------------------------------------------------------------------------
# raw parameter sets (duck-typed like a scene for the renderer)


@dataclass
class GaussianParams:
    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    lang: np.ndarray

    @property
    def K(self) -> int:
        return self.lang.shape[1]

    def __len__(self) -> int:
        return len(self.mu)

    @classmethod
    def from_scene(cls, scene: GaussianScene) -> "GaussianParams":
        return cls(*(np.array(getattr(scene, g), dtype=np.float64) for g in GROUPS))

    def copy(self) -> "GaussianParams":
        return GaussianParams(*(getattr(self, g).copy() for g in GROUPS))

    def to_scene(self, confidence=None, voxel_size: float | None = None) -> GaussianScene:
        kw = {} if voxel_size is None else {"voxel_size": voxel_size}
        return GaussianScene.from_arrays(self.mu, self.rot, self.scale, self.opacity, self.color, self.lang,
                                         confidence, **kw)

    def project_valid(self, scale_floor: float = 1e-4) -> None:
        """Renormalise quaternions and clamp the bounded attributes, in place."""
        n = np.linalg.norm(self.rot, axis=1, keepdims=True)
        self.rot[:] = np.where(n > 1e-12, self.rot / np.where(n > 1e-12, n, 1.0), [1.0, 0, 0, 0])
        self.rot *= np.where(self.rot[:, :1] < 0, -1.0, 1.0)
        np.maximum(self.scale, scale_floor, out=self.scale)
        np.clip(self.opacity, 0.0, 1.0, out=self.opacity)
        np.clip(self.color, 0.0, 1.0, out=self.color)


# ---------------------------------------------------------------------------
# objectives: target -> (value, upstream partials)

Objective = Callable[[RenderTarget], tuple[float, dict]]


def mse_objective(gt_image) -> Objective:
    def f(t: RenderTarget):
        v, g = loss_render_grad(t, gt_image)
        return v, {"d_color": g}
    return f


def lang_objective(gt_feature) -> Objective:
    def f(t: RenderTarget):
        v, g = loss_lang_grad(t, gt_feature)
        return v, {"d_feature": g}
    return f


def linear_objective(w_color=None, w_feature=None, w_alpha=None, w_depth=None) -> Objective:
    """Sum of buffers weighted elementwise; exactly linear in color and language."""
    def f(t: RenderTarget):
        v, up = 0.0, {}
        for name, wgt in (("color", w_color), ("feature", w_feature), ("alpha", w_alpha), ("depth", w_depth)):
            if wgt is not None:
                v += float(np.sum(getattr(t, name) * wgt))
                up["d_" + name] = np.broadcast_to(wgt, getattr(t, name).shape)
        return v, up
    return f


def sum_objectives(*objs: Objective, weights: Sequence[float] | None = None) -> Objective:
    weights = [1.0] * len(objs) if weights is None else list(weights)

    def f(t: RenderTarget):
        total, up = 0.0, {}
        for w, o in zip(weights, objs):
            v, u = o(t)
            total += w * v
            for k, g in u.items():
                up[k] = up.get(k, 0.0) + w * np.asarray(g)
        return total, up
    return f


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDiffReport:
    max_rel: dict[str, float]          # over entries with magnitude >= small
    max_abs_small: dict[str, float]    # over entries with magnitude < small
    checked: dict[str, int]
    non_smooth: list[tuple[str, int, int]] = field(default_factory=list)
    h_used_min: float = 0.0

    def passed(self, rel_tol: float = 1e-3, abs_tol: float = 1e-5) -> bool:
        return all(self.max_rel[g] < rel_tol and self.max_abs_small[g] < abs_tol for g in self.max_rel)


def finite_diff_check(scene, cam: CameraPose, intr: Intrinsics, objective: Objective, h: float = 1e-5,
                      groups: Sequence[str] = GROUPS, small: float = 1e-2, h_min: float = 1e-9,
                      adaptive: bool = True) -> FiniteDiffReport:
    """Central differences for every scalar parameter against the analytic gradient.

    The loss is only piecewise smooth: it has kinks where a primitive crosses
    the 3 sigma support of a pixel, the opacity clamp or a culling boundary.
    With ``adaptive`` the step for one parameter is divided by 10 until both
    stencil points see the same set of contributing (primitive, pixel) pairs
    as the base point; parameters that never reach a smooth stencil above
    ``h_min`` are listed in ``non_smooth`` and excluded from the error maxima.
    The default ``h`` is small against typical scales (a few hundredths), so
    truncation error stays well under the 1e-3 relative tolerance; at 1e-3
    it does not.
    """
    if not h > 0:
        raise InvalidArgumentError("h must be positive")
    base = GaussianParams.from_scene(scene) if isinstance(scene, GaussianScene) else scene.copy()
    target = rasterize(base, cam, intr)
    _, up = objective(target)
    grads = rasterize_backward(base, cam, intr, **up)
    sig0 = active_set_signature(base, cam, intr) if adaptive else None
    rep = FiniteDiffReport({}, {}, {})
    h_seen = h
    work = base.copy()

    def eval_at(arr, idx, value):
        arr[idx] = value
        v = objective(rasterize(work, cam, intr))[0]
        s = active_set_signature(work, cam, intr) if adaptive else None
        return v, s

    for g in groups:
        arr = getattr(work, g)
        ana = getattr(grads, g)
        max_rel, max_abs, count = 0.0, 0.0, 0
        for idx in np.ndindex(arr.shape):
            x0 = arr[idx]
            step = h
            fd = None
            while step >= h_min:
                vp, sp = eval_at(arr, idx, x0 + step)
                vm, sm = eval_at(arr, idx, x0 - step)
                arr[idx] = x0
                if not adaptive or (np.array_equal(sp, sig0) and np.array_equal(sm, sig0)):
                    fd = (vp - vm) / (2 * step)
                    break
                step /= 10.0
            if fd is None:
                rep.non_smooth.append((g, idx[0], idx[-1] if len(idx) > 1 else 0))
                continue
            h_seen = min(h_seen, step)
            a = float(ana[idx])
            mag = max(abs(a), abs(fd))
            err = abs(a - fd)
            if mag >= small:
                max_rel = max(max_rel, err / mag)
            else:
                max_abs = max(max_abs, err)
            count += 1
        rep.max_rel[g], rep.max_abs_small[g], rep.checked[g] = max_rel, max_abs, count
    rep.h_used_min = h_seen
    return rep


# ---------------------------------------------------------------------------
# direct optimisation


@dataclass
class OptimizeResult:
    params: GaussianParams
    curve: list[dict]
    seconds: float
    steps: int
    stats: dict = field(default_factory=dict)   # accepted / frozen_accepts / rejected

    def scene(self, confidence=None) -> GaussianScene:
        return self.params.to_scene(confidence)


DEFAULT_LR = {"mu": 2e-3, "rot": 5e-3, "scale": 5e-3, "opacity": 2e-2, "color": 1e-2, "lang": 1e-2}


def _objective_terms(params, views, w: LossWeights):
    render_sum, lang_sum = 0.0, 0.0
    targets = []
    for cam, intr, gt, feat in views:
        t = rasterize(params, cam, intr)
        targets.append(t)
        render_sum += loss_render(t, gt)
        if feat is not None:
            lang_sum += loss_lang(t, feat)
    nv = len(views)
    value = w.render * render_sum / nv
    if views[0][3] is not None:
        value += w.lang * lang_sum / nv
    return value, render_sum / nv, lang_sum / nv, targets


def _gradient(params, views, targets, w: LossWeights) -> dict[str, np.ndarray]:
    nv = len(views)
    total = {g: np.zeros_like(getattr(params, g)) for g in GROUPS}
    for (cam, intr, gt, feat), t in zip(views, targets):
        _, dc = loss_render_grad(t, gt)
        up = {"d_color": w.render * dc / nv}
        if feat is not None:
            _, df = loss_lang_grad(t, feat)
            up["d_feature"] = w.lang * df / nv
        gr = rasterize_backward(params, cam, intr, **up)
        for g in GROUPS:
            total[g] += getattr(gr, g)
    return total


def _trial(params: GaussianParams, direction: dict, mult: float, frozen: np.ndarray | None) -> GaussianParams:
    trial = params.copy()
    for g in GROUPS:
        d = mult * direction[g]
        if frozen is not None and frozen.any():
            d = d.copy()
            d[frozen] = 0.0
        if g == "scale":
            trial.scale *= np.exp(-d)
        else:
            getattr(trial, g)[...] -= d
    trial.project_valid()
    return trial


def _footprints(params, views) -> list[np.ndarray]:
    """Per view and primitive: support footprint plus depth rank (order swaps are jumps too)."""
    out = []
    for cam, intr, _, _ in views:
        z = (params.mu - cam.translation) @ cam.rotation[:, 2]
        rank = np.empty(len(z), dtype=np.int64)
        rank[np.lexsort((np.arange(len(z)), z))] = np.arange(len(z))
        out.append(np.column_stack([support_footprint(params, cam, intr), rank]))
    return out


def optimize_scene(scene, cameras: Sequence[CameraPose], images: Sequence[np.ndarray],
                   intr: Intrinsics | Sequence[Intrinsics], steps: int = 200, lr: dict | float | None = None,
                   features: Sequence[np.ndarray] | None = None, weights: LossWeights = LossWeights(),
                   log_every: int = 1, max_halvings: int = 8, hold_steps: int = 20,
                   stop_render: float | None = None,
                   callback: Callable[[int, float], None] | None = None) -> OptimizeResult:
    """Gradient descent on every Gaussian parameter against the image (and feature) loss.

    Steps follow Adam-preconditioned directions; scales move in log space.  A
    trial step is accepted only if it does not increase the loss, otherwise
    its length is halved.  The render has jumps where a support ellipse
    crosses a pixel center, and descent tends to park primitives right at
    such an edge.  When halving alone fails, primitives whose pixel footprint
    or depth rank would change are frozen and the rest retry; frozen
    primitives stay frozen for ``hold_steps`` steps.  Rejected steps
    leave the parameters untouched, so the recorded curve never increases.
    Parameters are projected onto their valid ranges after every step.
    With ``stop_render`` set, the run ends once the mean image MSE over the
    views drops to that value.
    """
    if not len(cameras) or len(cameras) != len(images):
        raise InvalidArgumentError("need at least one view and one image per camera")
    intrs = list(intr) if isinstance(intr, (list, tuple)) else [intr] * len(cameras)
    feats = list(features) if features is not None else [None] * len(cameras)
    views = list(zip(cameras, intrs, [np.asarray(i, dtype=np.float64) for i in images], feats))
    params = GaussianParams.from_scene(scene) if isinstance(scene, GaussianScene) else scene.copy()
    if len(params) == 0:
        raise InvalidArgumentError("scene is empty")
    params.project_valid()
    if lr is None:
        lr = dict(DEFAULT_LR)
    elif not isinstance(lr, dict):
        lr = {g: float(lr) * DEFAULT_LR[g] / DEFAULT_LR["color"] for g in GROUPS}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {g: np.zeros_like(getattr(params, g)) for g in GROUPS}
    v = {g: np.zeros_like(getattr(params, g)) for g in GROUPS}

    t0 = time.perf_counter()
    value, l_r, l_l, targets = _objective_terms(params, views, weights)
    if not math.isfinite(value):
        raise DivergenceError(f"initial loss is {value}")
    curve = [{"step": 0, "total": value, "pose": 0.0, "render": l_r, "lang": l_l}]
    mult = 1.0
    it = 0
    stats = {"accepted": 0, "frozen_accepts": 0, "rejected": 0}
    k = 0   # Adam step counter, restarted together with the moments
    hold = np.zeros(len(params), dtype=np.int64)
    for it in range(1, steps + 1):
        held = hold > 0
        hold[held] -= 1
        grad = _gradient(params, views, targets, weights)
        if not all(np.all(np.isfinite(gv)) for gv in grad.values()):
            raise DivergenceError(f"non-finite gradient at step {it}")
        if all(not np.any(gv) for gv in grad.values()):
            break
        grad["scale"] = grad["scale"] * params.scale
        k += 1
        direction = {}
        for g in GROUPS:
            m[g] = beta1 * m[g] + (1 - beta1) * grad[g]
            v[g] = beta2 * v[g] + (1 - beta2) * grad[g] ** 2
            direction[g] = lr[g] * (m[g] / (1 - beta1 ** k)) / (np.sqrt(v[g] / (1 - beta2 ** k)) + eps)

        accepted = None
        for _ in range(max_halvings):
            trial = _trial(params, direction, mult, held)
            res = _objective_terms(trial, views, weights)
            if not math.isfinite(res[0]):
                raise DivergenceError(f"loss became {res[0]} at step {it}")
            if res[0] < value:
                accepted = (trial, res)
                break
            mult *= 0.5
        if accepted is None:
            base_fp = _footprints(params, views)
            fmult = 1.0
            for _ in range(max_halvings):
                frozen = held.copy()
                while True:
                    probe = _trial(params, direction, fmult, frozen)
                    changed = np.zeros_like(frozen)
                    for f0, f1 in zip(base_fp, _footprints(probe, views)):
                        changed |= np.any(f0 != f1, axis=1)
                    if not np.any(changed & ~frozen):
                        break
                    frozen |= changed
                if not frozen.all():
                    res = _objective_terms(probe, views, weights)
                    if res[0] < value:
                        accepted = (probe, res)
                        stats["frozen_accepts"] += 1
                        hold[frozen & ~held] = hold_steps
                        mult = 2.0 * fmult
                        break
                fmult *= 0.5
        if accepted is not None:
            params, (value, l_r, l_l, targets) = accepted
            mult = min(1.0, mult * 2.0)
            stats["accepted"] += 1
        else:
            # stale momentum can point uphill for many steps; start over
            mult = 1.0
            stats["rejected"] += 1
            k = 0
            for g in GROUPS:
                m[g][...] = 0.0
                v[g][...] = 0.0
        if it % log_every == 0 or it == steps:
            curve.append({"step": it, "total": value, "pose": 0.0, "render": l_r, "lang": l_l})
        if callback is not None:
            callback(it, value)
        if stop_render is not None and l_r <= stop_render:
            if curve[-1]["step"] != it:
                curve.append({"step": it, "total": value, "pose": 0.0, "render": l_r, "lang": l_l})
            break
    return OptimizeResult(params, curve, time.perf_counter() - t0, it, stats)
