"""Tile-based software rasterizer for colour + language-feature Gaussians.

Per pixel ``v`` the primitives overlapping it are composited front to back::

    a_i  = min(opacity_i * exp(-q_i / 2), 0.999)    if q_i <= 9 else 0
    C(v) = sum_i c_i a_i T_i,   L(v) = sum_i l_i a_i T_i,   T_i = prod_{j<i} (1 - a_j)

where ``q_i`` is the squared Mahalanobis distance of the pixel centre under the
projected 2D covariance (with a 0.3 px^2 low-pass added).  Pixel ``(u, v)`` has
its centre at integer coordinates.  Colour, feature, depth and alpha share one
set of blending weights.

Three entry points:

* :func:`rasterize` -- 16x16 tiles, per-tile depth-sorted lists, early stop
  once transmittance drops below :data:`T_MIN`.  Numba kernels.
* :func:`brute_force_render` -- dense numpy evaluation of every pixel against
  every primitive with one global sort and no early stop.  Used as the oracle.
* :func:`rasterize_backward` -- analytic gradients of a scalar loss through
  compositing, the 2D projection and the covariance parameterisation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import CameraPose, GaussianPrimitive, GaussianScene, Intrinsics, InvalidArgumentError, quat_to_rotmat_unchecked

NEAR = 0.01
LOWPASS = 0.3
ALPHA_MAX = 0.999
SUPPORT_Q = 9.0  # 3 sigma
TILE = 16
# Tail dropped by the early stop is bounded by T_MIN * max|value|; kept well
# below the 1e-6 oracle tolerance for values up to O(100).
T_MIN = 1e-8


@dataclass
class RenderTarget:
    color: np.ndarray    # (H, W, 3)
    feature: np.ndarray  # (H, W, K)
    depth: np.ndarray    # (H, W) alpha-weighted, not renormalised
    alpha: np.ndarray    # (H, W)

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def normalized_depth(self, eps: float = 1e-12) -> np.ndarray:
        """Expected depth divided by accumulated alpha (0 where nothing was hit)."""
        return np.where(self.alpha > eps, self.depth / np.maximum(self.alpha, eps), 0.0)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray  # includes the low-pass term
    depth: float
    base_opacity: float


@dataclass
class RenderGradients:
    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    lang: np.ndarray

    GROUPS = ("mu", "rot", "scale", "opacity", "color", "lang")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {g: getattr(self, g) for g in self.GROUPS}


# ---------------------------------------------------------------------------
# projection


@dataclass
class _Projection:
    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray   # (N, 3): a, b, c of [[a, b], [b, c]]
    depth: np.ndarray
    radius: np.ndarray  # (N, 2) half extents of the 3 sigma bounding box
    # kept for the backward pass
    p_cam: np.ndarray
    W: np.ndarray
    R: np.ndarray
    T: np.ndarray
    sigma: np.ndarray
    qnorm: np.ndarray


@np.errstate(divide="ignore", invalid="ignore", over="ignore")
def _project(mu, rot, scale, cam: CameraPose, intr: Intrinsics) -> _Projection:
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    n = len(mu)
    W = cam.rotation.T
    p = mu @ W.T - W @ cam.translation
    z = p[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    qn = np.linalg.norm(rot, axis=1) if n else np.zeros(0)
    R = quat_to_rotmat_unchecked(rot / np.where(qn > 0, qn, 1.0)[:, None])
    A = R * scale[:, None, :]
    sigma = A @ A.transpose(0, 2, 1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * p[:, 0] / zs ** 2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * p[:, 1] / zs ** 2
    T = J @ W
    cov = T @ sigma @ T.transpose(0, 2, 1)
    cov[:, 0, 0] += LOWPASS
    cov[:, 1, 1] += LOWPASS
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
    mean2d = np.stack([intr.fx * p[:, 0] / zs + intr.cx, intr.fy * p[:, 1] / zs + intr.cy], axis=1)
    radius = 3.0 * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=1))
    inside = ((mean2d[:, 0] + radius[:, 0] >= 0.0) & (mean2d[:, 0] - radius[:, 0] <= intr.width - 1)
              & (mean2d[:, 1] + radius[:, 1] >= 0.0) & (mean2d[:, 1] - radius[:, 1] <= intr.height - 1))
    finite = np.isfinite(conic).all(axis=1) & np.isfinite(mean2d).all(axis=1)
    visible = front & inside & finite & (det > 0)
    return _Projection(visible, mean2d, cov, conic, z, radius, p, W, R, T, sigma, qn)


def project_gaussian(g: GaussianPrimitive, cam: CameraPose, intr: Intrinsics) -> ProjectedGaussian | None:
    """EWA projection of one primitive; ``None`` means culled."""
    pr = _project(g.mu[None], g.rot[None], g.scale[None], cam, intr)
    if not pr.visible[0]:
        return None
    return ProjectedGaussian(pr.mean2d[0].copy(), pr.cov2d[0].copy(), float(pr.depth[0]), g.opacity)


def _depth_order(pr: _Projection) -> np.ndarray:
    idx = np.flatnonzero(pr.visible)
    return idx[np.lexsort((idx, pr.depth[idx]))]


def _bin_tiles(pr: _Projection, order: np.ndarray, width: int, height: int):
    """Flattened per-tile primitive lists, each in global depth order."""
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    if len(order) == 0:
        return np.zeros(tw * th + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tw, th
    m = pr.mean2d[order]
    r = pr.radius[order] + 1.0  # conservative margin; the per-pixel test decides
    x0 = np.clip(np.floor(m[:, 0] - r[:, 0]), 0, width - 1).astype(np.int64) // TILE
    x1 = np.clip(np.ceil(m[:, 0] + r[:, 0]), 0, width - 1).astype(np.int64) // TILE
    y0 = np.clip(np.floor(m[:, 1] - r[:, 1]), 0, height - 1).astype(np.int64) // TILE
    y1 = np.clip(np.ceil(m[:, 1] + r[:, 1]), 0, height - 1).astype(np.int64) // TILE
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    cnt = nx * ny
    rank = np.repeat(np.arange(len(order)), cnt)
    local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tx = x0[rank] + local % nx[rank]
    ty = y0[rank] + local // nx[rank]
    tile = ty * tw + tx
    perm = np.lexsort((rank, tile))
    ids = order[rank[perm]]
    offsets = np.zeros(tw * th + 1, dtype=np.int64)
    np.add.at(offsets, tile + 1, 1)
    return np.cumsum(offsets), ids.astype(np.int64), tw, th


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _forward_kernel(width, height, tw, offsets, ids, mean2d, conic, opacity, colors, feats, depths,
                    t_min, out_c, out_f, out_d, out_a):
    K = feats.shape[1]
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        s = offsets[tile]
        e = offsets[tile + 1]
        if s == e:
            continue
        ty0 = (tile // tw) * 16
        tx0 = (tile % tw) * 16
        for py in range(ty0, min(ty0 + 16, height)):
            for px in range(tx0, min(tx0 + 16, width)):
                T = 1.0
                for k in range(s, e):
                    g = ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q > 9.0:
                        continue
                    a = opacity[g] * np.exp(-0.5 * q)
                    if a > 0.999:
                        a = 0.999
                    w = a * T
                    for c in range(3):
                        out_c[py, px, c] += w * colors[g, c]
                    for c in range(K):
                        out_f[py, px, c] += w * feats[g, c]
                    out_d[py, px] += w * depths[g]
                    T = T * (1.0 - a)
                    if T < t_min:
                        break
                out_a[py, px] = 1.0 - T


@njit(cache=True)
def _backward_kernel(width, height, tw, offsets, ids, mean2d, conic, opacity, colors, feats, depths,
                     t_min, up_c, up_f, up_d, up_a,
                     g_mean, g_conic, g_op, g_col, g_feat, g_depth):
    K = feats.shape[1]
    n_tiles = offsets.shape[0] - 1
    maxlen = 0
    for tile in range(n_tiles):
        maxlen = max(maxlen, offsets[tile + 1] - offsets[tile])
    buf_g = np.empty(maxlen, dtype=np.int64)
    buf_a = np.empty(maxlen)
    buf_T = np.empty(maxlen)
    buf_q = np.empty(maxlen)
    buf_dx = np.empty(maxlen)
    buf_dy = np.empty(maxlen)
    buf_clamp = np.empty(maxlen, dtype=np.bool_)
    for tile in range(n_tiles):
        s = offsets[tile]
        e = offsets[tile + 1]
        if s == e:
            continue
        ty0 = (tile // tw) * 16
        tx0 = (tile % tw) * 16
        for py in range(ty0, min(ty0 + 16, height)):
            for px in range(tx0, min(tx0 + 16, width)):
                T = 1.0
                n = 0
                for k in range(s, e):
                    g = ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q > 9.0:
                        continue
                    a = opacity[g] * np.exp(-0.5 * q)
                    clamped = False
                    if a > 0.999:
                        a = 0.999
                        clamped = True
                    buf_g[n] = g
                    buf_a[n] = a
                    buf_T[n] = T
                    buf_q[n] = q
                    buf_dx[n] = dx
                    buf_dy[n] = dy
                    buf_clamp[n] = clamped
                    n += 1
                    T = T * (1.0 - a)
                    if T < t_min:
                        break
                T_final = T
                ua = up_a[py, px]
                ud = up_d[py, px]
                behind = 0.0
                for j in range(n - 1, -1, -1):
                    g = buf_g[j]
                    a = buf_a[j]
                    Ti = buf_T[j]
                    w = a * Ti
                    v = ud * depths[g]
                    for c in range(3):
                        g_col[g, c] += w * up_c[py, px, c]
                        v += colors[g, c] * up_c[py, px, c]
                    for c in range(K):
                        g_feat[g, c] += w * up_f[py, px, c]
                        v += feats[g, c] * up_f[py, px, c]
                    g_depth[g] += w * ud
                    dL_da = Ti * v - behind / (1.0 - a) + ua * T_final / (1.0 - a)
                    behind += v * w
                    if buf_clamp[j]:
                        continue
                    G = np.exp(-0.5 * buf_q[j])
                    g_op[g] += dL_da * G
                    dq = -0.5 * opacity[g] * G * dL_da
                    dx = buf_dx[j]
                    dy = buf_dy[j]
                    g_mean[g, 0] -= dq * (2.0 * conic[g, 0] * dx + 2.0 * conic[g, 1] * dy)
                    g_mean[g, 1] -= dq * (2.0 * conic[g, 1] * dx + 2.0 * conic[g, 2] * dy)
                    g_conic[g, 0] += dq * dx * dx
                    g_conic[g, 1] += dq * 2.0 * dx * dy
                    g_conic[g, 2] += dq * dy * dy


@njit(cache=True)
def _signature_kernel(width, height, tw, offsets, ids, mean2d, conic, opacity, t_min, out):
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        s = offsets[tile]
        e = offsets[tile + 1]
        ty0 = (tile // tw) * 16
        tx0 = (tile % tw) * 16
        for py in range(ty0, min(ty0 + 16, height)):
            for px in range(tx0, min(tx0 + 16, width)):
                T = 1.0
                hsh = np.uint64(1469598103934665603)
                for k in range(s, e):
                    g = ids[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q > 9.0:
                        continue
                    a = opacity[g] * np.exp(-0.5 * q)
                    tag = 2 * g + 1
                    if a > 0.999:
                        a = 0.999
                        tag += 1
                    hsh = (hsh ^ np.uint64(tag)) * np.uint64(1099511628211)
                    T = T * (1.0 - a)
                    if T < t_min:
                        break
                out[py, px] = hsh


# ---------------------------------------------------------------------------
# public API


def _scene_arrays(scene: GaussianScene):
    return scene.mu, scene.rot, scene.scale, scene.opacity, scene.color, scene.lang


def _empty_target(intr: Intrinsics, K: int) -> RenderTarget:
    h, w = intr.height, intr.width
    return RenderTarget(np.zeros((h, w, 3)), np.zeros((h, w, K)), np.zeros((h, w)), np.zeros((h, w)))


def rasterize(scene: GaussianScene, cam: CameraPose, intr: Intrinsics, t_min: float = T_MIN) -> RenderTarget:
    mu, rot, scale, opacity, color, lang = _scene_arrays(scene)
    out = _empty_target(intr, scene.K)
    if len(scene) == 0:
        return out
    pr = _project(mu, rot, scale, cam, intr)
    order = _depth_order(pr)
    offsets, ids, tw, _ = _bin_tiles(pr, order, intr.width, intr.height)
    if len(ids) == 0:
        return out
    _forward_kernel(intr.width, intr.height, tw, offsets, ids, pr.mean2d, pr.conic,
                    np.ascontiguousarray(opacity), np.ascontiguousarray(color),
                    np.ascontiguousarray(lang), pr.depth, float(t_min),
                    out.color, out.feature, out.depth, out.alpha)
    return out


def brute_force_render(scene: GaussianScene, cam: CameraPose, intr: Intrinsics) -> RenderTarget:
    """Dense reference renderer: every pixel against every visible primitive."""
    h, w = intr.height, intr.width
    out = _empty_target(intr, scene.K)
    if len(scene) == 0:
        return out
    pr = _project(scene.mu, scene.rot, scene.scale, cam, intr)
    order = _depth_order(pr)
    if len(order) == 0:
        return out
    py, px = np.mgrid[0:h, 0:w]
    px = px.reshape(-1, 1).astype(np.float64)
    py = py.reshape(-1, 1).astype(np.float64)
    m = pr.mean2d[order]
    cn = pr.conic[order]
    dx = px - m[None, :, 0]
    dy = py - m[None, :, 1]
    q = cn[None, :, 0] * dx * dx + 2.0 * cn[None, :, 1] * dx * dy + cn[None, :, 2] * dy * dy
    a = np.minimum(scene.opacity[order][None, :] * np.exp(-0.5 * q), ALPHA_MAX)
    a = np.where(q > SUPPORT_Q, 0.0, a)
    trans = np.cumprod(1.0 - a, axis=1)
    before = np.concatenate([np.ones((len(px), 1)), trans[:, :-1]], axis=1)
    wts = a * before
    out.color[:] = (wts @ scene.color[order]).reshape(h, w, 3)
    out.feature[:] = (wts @ scene.lang[order]).reshape(h, w, scene.K)
    out.depth[:] = (wts @ pr.depth[order]).reshape(h, w)
    out.alpha[:] = (1.0 - trans[:, -1]).reshape(h, w)
    return out


def _quat_backward(q: np.ndarray, qn: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient wrt the raw quaternion given dL/dR of the normalised rotation."""
    u = q / qn[:, None]
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    d = dR
    gw = 2 * (z * (d[:, 1, 0] - d[:, 0, 1]) + y * (d[:, 0, 2] - d[:, 2, 0]) + x * (d[:, 2, 1] - d[:, 1, 2]))
    gx = (2 * (y * (d[:, 1, 0] + d[:, 0, 1]) + z * (d[:, 2, 0] + d[:, 0, 2]) + w * (d[:, 2, 1] - d[:, 1, 2]))
          - 4 * x * (d[:, 1, 1] + d[:, 2, 2]))
    gy = (2 * (x * (d[:, 1, 0] + d[:, 0, 1]) + w * (d[:, 0, 2] - d[:, 2, 0]) + z * (d[:, 2, 1] + d[:, 1, 2]))
          - 4 * y * (d[:, 0, 0] + d[:, 2, 2]))
    gz = (2 * (w * (d[:, 1, 0] - d[:, 0, 1]) + x * (d[:, 2, 0] + d[:, 0, 2]) + y * (d[:, 2, 1] + d[:, 1, 2]))
          - 4 * z * (d[:, 0, 0] + d[:, 1, 1]))
    gu = np.stack([gw, gx, gy, gz], axis=1)
    return (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / qn[:, None]


@np.errstate(divide="ignore", invalid="ignore", over="ignore")
def rasterize_backward(scene: GaussianScene, cam: CameraPose, intr: Intrinsics,
                       d_color=None, d_feature=None, d_alpha=None, d_depth=None,
                       t_min: float = T_MIN) -> RenderGradients:
    """Gradients of a scalar loss wrt every Gaussian parameter.

    ``d_*`` are the per-pixel partials of the loss wrt the corresponding
    :class:`RenderTarget` buffers; missing ones are treated as zero.  The
    rotation gradient is taken wrt the stored quaternion and includes the
    normalisation step.
    """
    n, K = len(scene), scene.K
    h, w = intr.height, intr.width
    grads = RenderGradients(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                            np.zeros((n, 3)), np.zeros((n, K)))
    if n == 0:
        return grads
    up_c = np.zeros((h, w, 3)) if d_color is None else np.ascontiguousarray(d_color, dtype=np.float64)
    up_f = np.zeros((h, w, K)) if d_feature is None else np.ascontiguousarray(d_feature, dtype=np.float64)
    up_a = np.zeros((h, w)) if d_alpha is None else np.ascontiguousarray(d_alpha, dtype=np.float64)
    up_d = np.zeros((h, w)) if d_depth is None else np.ascontiguousarray(d_depth, dtype=np.float64)
    if up_c.shape != (h, w, 3) or up_f.shape != (h, w, K) or up_a.shape != (h, w) or up_d.shape != (h, w):
        raise InvalidArgumentError("upstream gradient shapes do not match the render target")

    mu, rot, scale, opacity, color, lang = _scene_arrays(scene)
    pr = _project(mu, rot, scale, cam, intr)
    order = _depth_order(pr)
    offsets, ids, tw, _ = _bin_tiles(pr, order, w, h)
    if len(ids) == 0:
        return grads
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_depth = np.zeros(n)
    _backward_kernel(w, h, tw, offsets, ids, pr.mean2d, pr.conic, np.ascontiguousarray(opacity),
                     np.ascontiguousarray(color), np.ascontiguousarray(lang), pr.depth, float(t_min),
                     up_c, up_f, up_d, up_a, g_mean, g_conic, grads.opacity, grads.color, grads.lang, g_depth)

    vis = pr.visible
    # conic = inverse(cov2d): full-matrix gradient, off-diagonal split evenly
    Gc = np.empty((n, 2, 2))
    Gc[:, 0, 0] = g_conic[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gc[:, 1, 1] = g_conic[:, 2]
    C = np.empty((n, 2, 2))
    C[:, 0, 0] = pr.conic[:, 0]
    C[:, 0, 1] = C[:, 1, 0] = pr.conic[:, 1]
    C[:, 1, 1] = pr.conic[:, 2]
    dcov = -C @ Gc @ C
    # cov2d = T Sigma T^T + lowpass, T = J W
    Tm = pr.T
    d_sigma = Tm.transpose(0, 2, 1) @ dcov @ Tm
    dT = 2.0 * dcov @ Tm @ pr.sigma
    dJ = dT @ pr.W.T
    x, y, z = pr.p_cam[:, 0], pr.p_cam[:, 1], np.where(vis, pr.p_cam[:, 2], 1.0)
    fx, fy = intr.fx, intr.fy
    dp = np.zeros((n, 3))
    dp[:, 0] = g_mean[:, 0] * fx / z - dJ[:, 0, 2] * fx / z ** 2
    dp[:, 1] = g_mean[:, 1] * fy / z - dJ[:, 1, 2] * fy / z ** 2
    dp[:, 2] = (-g_mean[:, 0] * fx * x / z ** 2 - g_mean[:, 1] * fy * y / z ** 2
                - dJ[:, 0, 0] * fx / z ** 2 + dJ[:, 0, 2] * 2.0 * fx * x / z ** 3
                - dJ[:, 1, 1] * fy / z ** 2 + dJ[:, 1, 2] * 2.0 * fy * y / z ** 3
                + g_depth)
    grads.mu[:] = dp @ pr.W
    # Sigma = A A^T, A = R diag(scale)
    A = pr.R * scale[:, None, :]
    dA = 2.0 * d_sigma @ A
    grads.scale[:] = np.sum(dA * pr.R, axis=1)
    dR = dA * scale[:, None, :]
    grads.rot[:] = _quat_backward(rot, pr.qnorm, dR)
    for arr in (grads.mu, grads.rot, grads.scale, grads.opacity, grads.color, grads.lang):
        arr[~vis] = 0.0
    return grads


def active_set_signature(scene: GaussianScene, cam: CameraPose, intr: Intrinsics,
                         t_min: float = T_MIN) -> np.ndarray:
    """Per-pixel hash of the ordered contributor list and clamp flags.

    Two parameter settings with equal signatures lie on the same smooth piece
    of the (piecewise smooth) render function; used by the finite-difference
    harness to keep its stencils away from support boundaries.
    """
    out = np.zeros((intr.height, intr.width), dtype=np.uint64)
    if len(scene) == 0:
        return out
    pr = _project(scene.mu, scene.rot, scene.scale, cam, intr)
    order = _depth_order(pr)
    offsets, ids, tw, _ = _bin_tiles(pr, order, intr.width, intr.height)
    _signature_kernel(intr.width, intr.height, tw, offsets, ids, pr.mean2d, pr.conic,
                      np.ascontiguousarray(scene.opacity), float(t_min), out)
    return out


@njit(cache=True)
def _footprint_kernel(width, height, visible, mean2d, conic, radius, out):
    for i in range(len(visible)):
        if not visible[i]:
            continue
        x0 = max(0, int(np.ceil(mean2d[i, 0] - radius[i, 0] - 1.0)))
        x1 = min(width - 1, int(np.floor(mean2d[i, 0] + radius[i, 0] + 1.0)))
        y0 = max(0, int(np.ceil(mean2d[i, 1] - radius[i, 1] - 1.0)))
        y1 = min(height - 1, int(np.floor(mean2d[i, 1] + radius[i, 1] + 1.0)))
        cnt = 0
        acc = 0
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                dx = x - mean2d[i, 0]
                dy = y - mean2d[i, 1]
                q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                if q <= SUPPORT_Q:
                    cnt += 1
                    acc += (y * width + x + 1) * (y * width + x + 7)
        out[i, 0] = cnt
        out[i, 1] = acc


def support_footprint(scene, cam: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Per-primitive (pixel count, pixel-set checksum) of its truncated support.

    The render is discontinuous exactly where a support ellipse crosses a
    pixel center; a parameter change that leaves every footprint unchanged
    (and keeps the depth order) stays on one smooth piece.
    """
    out = np.zeros((len(scene), 2), dtype=np.int64)
    if len(scene) == 0:
        return out
    pr = _project(scene.mu, scene.rot, scene.scale, cam, intr)
    _footprint_kernel(intr.width, intr.height, pr.visible, pr.mean2d, pr.conic, pr.radius, out)
    return out
