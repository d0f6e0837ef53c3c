"""Implicit Gaussian fusion: merge incoming primitives into co-voxel scene content.

For an incoming primitive with center ``x_t`` and confidence ``c_t`` the
neighbourhood is every existing primitive in the same voxel.  The center moves
to the confidence-weighted mean of itself and its neighbours, the neighbours'
latent vectors are confidence-averaged into ``g_n`` and a small MLP maps
``[g_t, g_n]`` to the fused latent.  Absorbed neighbours are removed and the
fused primitive carries the summed confidence.

In the default wiring the latent is the decoded attribute vector
``[scale(3), rot(4), opacity(1), color(3), lang(K)]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianPrimitive, GaussianScene, InvalidArgumentError, voxel_key, voxel_keys

__all__ = [
    "FusionMlp", "FusionNeighborhood", "FusionReport", "attribute_vector", "decode_attributes",
    "fuse_center", "fuse_features", "gather_neighborhood", "integrate_frame", "voxel_key",
]

SCALE_FLOOR = 1e-6


@dataclass
class FusionNeighborhood:
    indices: list[int]
    weights: np.ndarray                     # confidences c_i, all > 0
    positions: np.ndarray | None = None     # (n, 3) centers x_i
    features: np.ndarray | None = None      # (n, F) latents g_i

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.weights) != len(self.indices):
            raise InvalidArgumentError("one weight per neighbour is required")
        if np.any(~(self.weights > 0)):
            raise InvalidArgumentError("neighbour confidences must be positive")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.features is not None:
            self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def pooled_feature(self) -> np.ndarray | None:
        """Confidence-weighted mean of the neighbour latents; ``None`` when empty."""
        if not len(self) or self.features is None:
            return None
        w = self.weights / self.weights.sum()
        return w @ self.features


@dataclass
class FusionMlp:
    """``W2 @ relu(W1 @ [g_t, g_n] + b1) + b2`` with weights in (out, in) layout."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1, self.b1, self.w2, self.b2 = (np.asarray(a, dtype=np.float64) for a in
                                              (self.w1, self.b1, self.w2, self.b2))
        hidden, two_f = self.w1.shape
        if two_f % 2 or self.w2.shape != (two_f // 2, hidden) or self.b1.shape != (hidden,) \
                or self.b2.shape != (two_f // 2,):
            raise InvalidArgumentError("inconsistent fusion MLP shapes")

    @property
    def width(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def identity(cls, F: int) -> "FusionMlp":
        """Weights for which the output equals the first F inputs exactly.

        Uses ``relu(x) - relu(-x) = x`` so it needs a hidden width of 2F.
        """
        eye, zero = np.eye(F), np.zeros((F, F))
        w1 = np.block([[eye, zero], [-eye, zero]])
        w2 = np.hstack([eye, -eye])
        return cls(w1, np.zeros(2 * F), w2, np.zeros(F))

    @classmethod
    def random(cls, F: int, seed: int = 0, hidden: int | None = None) -> "FusionMlp":
        hidden = 2 * F if hidden is None else hidden
        rng = np.random.default_rng(seed)
        b1 = 1.0 / np.sqrt(2 * F)
        b2 = 1.0 / np.sqrt(hidden)
        return cls(rng.uniform(-b1, b1, (hidden, 2 * F)), rng.uniform(-b1, b1, hidden),
                   rng.uniform(-b2, b2, (F, hidden)), rng.uniform(-b2, b2, F))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w1.shape[1]:
            raise InvalidArgumentError(f"MLP expects width {self.w1.shape[1]}, got {x.shape[-1]}")
        h = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return h @ self.w2.T + self.b2


@dataclass
class FusionReport:
    incoming: int = 0
    merges: int = 0
    absorbed: int = 0
    appended: int = 0
    count: int = 0
    merged_into: list[tuple[int, list[int]]] = field(default_factory=list, repr=False)


def fuse_center(x_t, c_t: float, nbrs: FusionNeighborhood) -> np.ndarray:
    """Confidence-weighted mean of ``x_t`` and the neighbour centers."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if not c_t > 0:
        raise InvalidArgumentError("confidence must be positive")
    if not len(nbrs):
        return x_t.copy()
    if nbrs.positions is None:
        raise InvalidArgumentError("neighbourhood positions are required")
    c = np.concatenate([[c_t], nbrs.weights])
    w = c / c.sum()
    return w @ np.vstack([x_t[None], nbrs.positions])


def fuse_features(g_t, nbrs: FusionNeighborhood, mlp: FusionMlp) -> np.ndarray:
    g_t = np.asarray(g_t, dtype=np.float64).reshape(-1)
    if g_t.shape[0] != mlp.width:
        raise InvalidArgumentError(f"latent width {g_t.shape[0]} does not match MLP width {mlp.width}")
    if not len(nbrs):
        return g_t.copy()
    g_n = nbrs.pooled_feature
    if g_n is None or g_n.shape[0] != mlp.width:
        raise InvalidArgumentError("neighbour latents missing or of the wrong width")
    return mlp(np.concatenate([g_t, g_n]))


def attribute_vector(scale, rot, opacity, color, lang) -> np.ndarray:
    """Pack decoded attributes into fusion latents, shape (N, 11 + K)."""
    return np.concatenate([np.atleast_2d(scale), np.atleast_2d(rot), np.reshape(opacity, (-1, 1)),
                           np.atleast_2d(color), np.atleast_2d(lang)], axis=1)


def decode_attributes(g: np.ndarray, K: int, fallback_rot: np.ndarray):
    """Unpack fused attribute latents and project them back onto the valid set."""
    g = np.atleast_2d(g)
    scale = np.maximum(g[:, 0:3], SCALE_FLOOR)
    rot = g[:, 3:7].copy()
    n = np.linalg.norm(rot, axis=1)
    bad = ~(n > 1e-12)
    rot[bad] = fallback_rot[bad]
    # leave already-unit quaternions bit-identical
    fix = ~bad & (np.abs(n - 1.0) > 1e-12)
    rot[fix] /= n[fix, None]
    opacity = np.clip(g[:, 7], 0.0, 1.0)
    color = np.clip(g[:, 8:11], 0.0, 1.0)
    lang = g[:, 11:11 + K]
    return scale, rot, opacity, color, lang


def gather_neighborhood(scene: GaussianScene, position, latent: str = "attributes") -> FusionNeighborhood:
    idx = list(scene.neighbors(voxel_key(position, scene.voxel_size)))
    return FusionNeighborhood(idx, scene.confidence[idx], scene.mu[idx], _latents(scene, idx, latent))


def _latents(scene: GaussianScene, idx, latent: str) -> np.ndarray:
    if latent == "attributes":
        return attribute_vector(scene.scale[idx], scene.rot[idx], scene.opacity[idx],
                                scene.color[idx], scene.lang[idx])
    if latent == "stored":
        if scene.latent is None:
            raise InvalidArgumentError("scene carries no stored latents")
        return scene.latent[idx]
    raise InvalidArgumentError(f"unknown latent wiring {latent!r}")


def integrate_frame(scene: GaussianScene, new: GaussianScene, mlp: FusionMlp,
                    decoder=None) -> FusionReport:
    """Fuse one frame's primitives into ``scene`` in place.

    Each voxel that already holds scene content is claimed by the first
    incoming primitive (in storage order) that falls into it; that primitive
    absorbs every pre-existing primitive of the voxel.  Incoming primitives
    never fuse with each other, so later arrivals in a claimed voxel are
    appended unchanged.

    ``decoder`` switches to the stored-latent wiring: both scenes must carry
    latents, fusion runs on them and ``decoder(latents)`` returns the
    ``(scale, rot, opacity, color, lang)`` arrays for the fused rows.
    """
    if new.K != scene.K:
        raise InvalidArgumentError(f"K mismatch: scene {scene.K}, frame {new.K}")
    wiring = "stored" if decoder is not None else "attributes"
    report = FusionReport(incoming=len(new))
    m = len(new)
    if m == 0:
        report.count = len(scene)
        return report

    keys = voxel_keys(new.mu, scene.voxel_size)
    claimed: set[tuple] = set()
    merge_rows: list[int] = []
    merge_nbrs: list[list[int]] = []
    for j, key in enumerate(map(tuple, keys.tolist())):
        bucket = scene.voxel_index.get(key)
        if bucket and key not in claimed:
            claimed.add(key)
            merge_rows.append(j)
            merge_nbrs.append(list(bucket))

    mu = new.mu.copy()
    rot, scale = new.rot.copy(), new.scale.copy()
    opacity, color, lang = new.opacity.copy(), new.color.copy(), new.lang.copy()
    conf = new.confidence.copy()
    lat = new.latent.copy() if new.latent is not None else None

    if merge_rows:
        rows = np.asarray(merge_rows)
        flat = np.concatenate([np.asarray(b, dtype=np.int64) for b in merge_nbrs])
        sizes = np.array([len(b) for b in merge_nbrs])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        c_n = scene.confidence[flat]
        c_sum = np.add.reduceat(c_n, starts)
        c_t = conf[rows]
        total = c_t + c_sum
        # weighted means with normalised weights, so a lone identical
        # neighbour reproduces the input exactly
        w_self = c_t / total
        w_n = c_n / np.repeat(total, sizes)
        mu[rows] = w_self[:, None] * mu[rows] + np.add.reduceat(w_n[:, None] * scene.mu[flat], starts)
        g_all = _latents(scene, flat, wiring)
        w_pool = c_n / np.repeat(c_sum, sizes)
        g_n = np.add.reduceat(w_pool[:, None] * g_all, starts)
        g_t = _latents(new, rows, wiring)
        g_new = mlp(np.concatenate([g_t, g_n], axis=1))
        if decoder is None:
            s, r, o, c, l = decode_attributes(g_new, scene.K, fallback_rot=rot[rows])
        else:
            s, r, o, c, l = decoder(g_new)
            lat[rows] = g_new
        scale[rows], rot[rows], opacity[rows], color[rows], lang[rows] = s, r, o, c, l
        conf[rows] = total
        report.merged_into = list(zip(merge_rows, merge_nbrs))
        report.merges = len(rows)
        report.absorbed = int(sizes.sum())
        scene.remove(flat.tolist())

    scene.append(mu, rot, scale, opacity, color, lang, conf, validate=False, latent=lat)
    report.appended = m
    report.count = len(scene)
    return report


def integrate_primitives(scene: GaussianScene, prims: list[GaussianPrimitive], mlp: FusionMlp) -> FusionReport:
    """Convenience wrapper taking a list of :class:`GaussianPrimitive`."""
    batch = GaussianScene.from_primitives(prims, K=scene.K, voxel_size=scene.voxel_size)
    return integrate_frame(scene, batch, mlp)
