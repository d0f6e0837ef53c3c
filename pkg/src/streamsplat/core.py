"""Geometric and Gaussian domain types shared across the engine.

Conventions
-----------
* Quaternions are ``(w, x, y, z)`` with the scalar first.  Serialised and
  stored quaternions are canonicalised to ``w >= 0``.
* A :class:`CameraPose` maps camera-frame points into the world frame
  (``x_world = R @ x_cam + t``); the world frame is the first camera.
* A :class:`GaussianScene` stores primitives as parallel numpy arrays
  (structure of arrays) together with a voxel hash from integer cell keys to
  the primitive indices living in that cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_K = 16
DEFAULT_VOXEL_SIZE = 0.05
UNIT_TOL = 1e-6


class InvalidArgumentError(ValueError):
    """Raised when an input violates an operation's preconditions."""


# ---------------------------------------------------------------------------
# rotations


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Flip quaternion(s) so the scalar part is non-negative."""
    q = np.asarray(q, dtype=np.float64)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_to_rotmat_unchecked(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (already normalised) quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_to_rotmat(q) -> np.ndarray:
    """Convert a unit quaternion ``(w, x, y, z)`` to a 3x3 rotation matrix.

    Raises :class:`InvalidArgumentError` when ``|q|`` deviates from 1 by more
    than 1e-6.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidArgumentError(f"quaternion must have shape (4,), got {q.shape}")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or abs(n - 1.0) > UNIT_TOL:
        raise InvalidArgumentError(f"quaternion is not unit length (|q| = {n:.9g})")
    return quat_to_rotmat_unchecked(q)


def rotmat_to_quat(R) -> np.ndarray:
    """Shepperd's method; the result is canonicalised to ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    q /= np.linalg.norm(q)
    return canonical_quat(q)


def axis_angle_to_rotmat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def covariance_from_rs(rot, scale) -> np.ndarray:
    """3D covariance ``R S S^T R^T`` from a unit quaternion and per-axis scales."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,):
        raise InvalidArgumentError(f"scale must have shape (3,), got {scale.shape}")
    if not np.all(scale > 0.0):
        raise InvalidArgumentError(f"scale components must be positive, got {scale}")
    M = quat_to_rotmat(rot) * scale[None, :]
    cov = M @ M.T
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# cameras


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3):
        raise InvalidArgumentError(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidArgumentError("rotation has non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > UNIT_TOL or abs(np.linalg.det(R) - 1.0) > UNIT_TOL:
        raise InvalidArgumentError("rotation is not orthonormal with det +1")


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray
    # quaternion exactly as given to from_quat_trans(..., keep_quat=True);
    # lets text formats reproduce their own digits
    source_quat: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        _check_rotation(R)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvalidArgumentError("translation must be a finite 3-vector")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "CameraPose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quat_trans(cls, q, t, keep_quat: bool = False) -> "CameraPose":
        q = np.asarray(q, dtype=np.float64)
        n = np.linalg.norm(q)
        kept = canonical_quat(q).copy() if keep_quat and abs(n - 1.0) <= UNIT_TOL else None
        return cls(quat_to_rotmat_unchecked(q / n), t, kept)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target``; camera y points down (OpenCV)."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quat(self) -> np.ndarray:
        if self.source_quat is not None:
            return self.source_quat.copy()
        return rotmat_to_quat(self.rotation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        return se3_compose(self, other)

    def inverse(self) -> "CameraPose":
        return se3_inverse(self)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"CameraPose(q={np.round(self.quat(), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    # long chains accumulate drift; snap back with an SVD only when needed
    if np.abs(R.T @ R - np.eye(3)).max() <= 1e-12:
        return R
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def se3_compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    R = _reorthonormalize(a.rotation @ b.rotation)
    return CameraPose(R, a.rotation @ b.translation + a.translation)


def se3_inverse(a: CameraPose) -> CameraPose:
    Rt = a.rotation.T
    return CameraPose(Rt, -Rt @ a.translation)


def transform_points(pose: CameraPose, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height or self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("width and height must be positive integers")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


# ---------------------------------------------------------------------------
# Gaussians


def _validate_primitive_arrays(rot, scale, opacity, color, confidence, tol=UNIT_TOL):
    n = np.linalg.norm(rot, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise InvalidArgumentError("rotation quaternions must be unit length")
    if np.any(~(scale > 0.0)):
        raise InvalidArgumentError("scales must be positive")
    if np.any((opacity < 0.0) | (opacity > 1.0)):
        raise InvalidArgumentError("opacity must lie in [0, 1]")
    if np.any((color < 0.0) | (color > 1.0)):
        raise InvalidArgumentError("color must lie in [0, 1]")
    if np.any(~(confidence > 0.0)):
        raise InvalidArgumentError("confidence must be positive")


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    """One splat: center, rotation, scale, opacity, colour, language feature, confidence."""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    lang: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        vals = {
            "mu": np.array(self.mu, dtype=np.float64).reshape(-1),
            "rot": np.array(self.rot, dtype=np.float64).reshape(-1),
            "scale": np.array(self.scale, dtype=np.float64).reshape(-1),
            "color": np.array(self.color, dtype=np.float64).reshape(-1),
            "lang": np.array(self.lang, dtype=np.float64).reshape(-1),
        }
        for name, n in (("mu", 3), ("rot", 4), ("scale", 3), ("color", 3)):
            if vals[name].shape != (n,):
                raise InvalidArgumentError(f"{name} must have {n} components")
        _validate_primitive_arrays(vals["rot"], vals["scale"], np.float64(self.opacity),
                                   vals["color"], np.float64(self.confidence))
        for name, v in vals.items():
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "confidence", float(self.confidence))

    @property
    def K(self) -> int:
        return self.lang.shape[0]

    def covariance(self) -> np.ndarray:
        return covariance_from_rs(self.rot, self.scale)


def voxel_key(position, voxel_size: float) -> tuple[int, int, int]:
    """Integer cell containing ``position``: ``floor(position / voxel_size)``."""
    if not voxel_size > 0:
        raise InvalidArgumentError("voxel_size must be positive")
    k = np.floor(np.asarray(position, dtype=np.float64) / voxel_size).astype(np.int64)
    return int(k[0]), int(k[1]), int(k[2])


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Vectorised :func:`voxel_key`, shape (N, 3) int64."""
    if not voxel_size > 0:
        raise InvalidArgumentError("voxel_size must be positive")
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


_FIELDS = ("mu", "rot", "scale", "opacity", "color", "lang", "confidence")


class GaussianScene:
    """Growing set of Gaussians with a voxel-hash index over their centers.

    Arrays are over-allocated and grown geometrically; removal swaps the last
    primitive into the freed slot so appends and removals cost O(1) per
    primitive regardless of scene size.
    """

    def __init__(self, K: int = DEFAULT_K, voxel_size: float = DEFAULT_VOXEL_SIZE, capacity: int = 64,
                 latent_dim: int = 0):
        if K <= 0:
            raise InvalidArgumentError("K must be positive")
        if not voxel_size > 0:
            raise InvalidArgumentError("voxel_size must be positive")
        self.K = int(K)
        self.voxel_size = float(voxel_size)
        # optional per-primitive latent vector carried alongside the attributes
        self.latent_dim = int(latent_dim)
        self._fields = _FIELDS + (("latent",) if self.latent_dim else ())
        self.voxel_index: dict[tuple[int, int, int], list[int]] = {}
        self._n = 0
        self._keys: list[tuple[int, int, int]] = []
        self._alloc(max(int(capacity), 1))

    # -- storage -----------------------------------------------------------
    def _alloc(self, cap: int) -> None:
        shapes = {"mu": 3, "rot": 4, "scale": 3, "opacity": None, "color": 3,
                  "lang": self.K, "confidence": None, "latent": self.latent_dim}
        shapes = {f: shapes[f] for f in self._fields}
        old = {f: getattr(self, "_" + f, None) for f in self._fields}
        for f, w in shapes.items():
            arr = np.zeros((cap,) if w is None else (cap, w))
            if old[f] is not None:
                arr[: self._n] = old[f][: self._n]
            setattr(self, "_" + f, arr)
        self._cap = cap

    def __len__(self) -> int:
        return self._n

    @property
    def mu(self) -> np.ndarray:
        return self._mu[: self._n]

    @property
    def rot(self) -> np.ndarray:
        return self._rot[: self._n]

    @property
    def scale(self) -> np.ndarray:
        return self._scale[: self._n]

    @property
    def opacity(self) -> np.ndarray:
        return self._opacity[: self._n]

    @property
    def color(self) -> np.ndarray:
        return self._color[: self._n]

    @property
    def lang(self) -> np.ndarray:
        return self._lang[: self._n]

    @property
    def confidence(self) -> np.ndarray:
        return self._confidence[: self._n]

    @property
    def latent(self) -> np.ndarray | None:
        return self._latent[: self._n] if self.latent_dim else None

    def arrays(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in _FIELDS}

    # -- construction ------------------------------------------------------
    @classmethod
    def from_arrays(cls, mu, rot, scale, opacity, color, lang, confidence=None,
                    voxel_size: float = DEFAULT_VOXEL_SIZE, validate: bool = True) -> "GaussianScene":
        lang = np.asarray(lang, dtype=np.float64)
        if lang.ndim != 2:
            raise InvalidArgumentError("lang must be (N, K)")
        scene = cls(K=lang.shape[1], voxel_size=voxel_size, capacity=max(len(lang), 1))
        if confidence is None:
            confidence = np.ones(len(lang))
        scene.append(mu, rot, scale, opacity, color, lang, confidence, validate=validate)
        return scene

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive], K: int | None = None,
                        voxel_size: float = DEFAULT_VOXEL_SIZE) -> "GaussianScene":
        prims = list(prims)
        if K is None:
            K = prims[0].K if prims else DEFAULT_K
        scene = cls(K=K, voxel_size=voxel_size, capacity=max(len(prims), 1))
        if prims:
            scene.append(*(np.stack([np.asarray(getattr(p, f), dtype=np.float64) for p in prims])
                           for f in _FIELDS))
        return scene

    def copy(self) -> "GaussianScene":
        out = GaussianScene(self.K, self.voxel_size, capacity=max(self._n, 1), latent_dim=self.latent_dim)
        for f in self._fields:
            getattr(out, "_" + f)[: self._n] = getattr(self, f)
        out._n = self._n
        out._keys = list(self._keys)
        out.voxel_index = {k: list(v) for k, v in self.voxel_index.items()}
        return out

    def primitive(self, i: int) -> GaussianPrimitive:
        if not 0 <= i < self._n:
            raise IndexError(i)
        return GaussianPrimitive(self._mu[i], self._rot[i], self._scale[i], self._opacity[i],
                                 self._color[i], self._lang[i], self._confidence[i])

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(self._n)]

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        return (self.primitive(i) for i in range(self._n))

    # -- mutation ----------------------------------------------------------
    def append(self, mu, rot, scale, opacity, color, lang, confidence, validate: bool = True,
               latent=None) -> np.ndarray:
        """Append a batch of primitives; returns their new indices."""
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        m = len(mu)
        rot = np.asarray(rot, dtype=np.float64).reshape(m, 4)
        scale = np.asarray(scale, dtype=np.float64).reshape(m, 3)
        opacity = np.asarray(opacity, dtype=np.float64).reshape(m)
        color = np.asarray(color, dtype=np.float64).reshape(m, 3)
        lang = np.asarray(lang, dtype=np.float64).reshape(m, self.K if m == 0 else -1)
        confidence = np.asarray(confidence, dtype=np.float64).reshape(m)
        if lang.shape[1] != self.K:
            raise InvalidArgumentError(f"lang width {lang.shape[1]} does not match scene K={self.K}")
        if validate and m:
            _validate_primitive_arrays(rot, scale, opacity, color, confidence)
            if not np.all(np.isfinite(mu)):
                raise InvalidArgumentError("centers must be finite")
        if self._n + m > self._cap:
            self._alloc(max(2 * self._cap, self._n + m))
        sl = slice(self._n, self._n + m)
        self._mu[sl], self._rot[sl], self._scale[sl] = mu, rot, scale
        self._opacity[sl], self._color[sl], self._lang[sl] = opacity, color, lang
        self._confidence[sl] = confidence
        if self.latent_dim:
            if latent is None:
                raise InvalidArgumentError("scene carries latents; append needs them")
            self._latent[sl] = np.asarray(latent, dtype=np.float64).reshape(m, self.latent_dim)
        idx = np.arange(self._n, self._n + m)
        keys = voxel_keys(mu, self.voxel_size)
        for i, k in zip(idx.tolist(), map(tuple, keys.tolist())):
            self._keys.append(k)
            self.voxel_index.setdefault(k, []).append(i)
        self._n += m
        return idx

    def add(self, prim: GaussianPrimitive) -> int:
        if prim.K != self.K:
            raise InvalidArgumentError("primitive K does not match scene")
        return int(self.append(prim.mu, prim.rot, prim.scale, prim.opacity, prim.color,
                               prim.lang, prim.confidence, validate=False)[0])

    def set_row(self, i: int, mu, rot, scale, opacity, color, lang, confidence, latent=None) -> None:
        """Overwrite primitive ``i`` in place, moving it between voxel buckets if needed."""
        self._mu[i], self._rot[i], self._scale[i] = mu, rot, scale
        self._opacity[i], self._color[i], self._lang[i] = opacity, color, lang
        self._confidence[i] = confidence
        if latent is not None:
            self._latent[i] = latent
        k = voxel_key(self._mu[i], self.voxel_size)
        old = self._keys[i]
        if k != old:
            self._bucket_discard(old, i)
            self.voxel_index.setdefault(k, []).append(i)
            self._keys[i] = k

    def _bucket_discard(self, key, i: int) -> None:
        bucket = self.voxel_index[key]
        bucket.remove(i)
        if not bucket:
            del self.voxel_index[key]

    def remove(self, indices: Iterable[int]) -> None:
        """Remove primitives by swapping the last one into each freed slot.

        Indices refer to the scene before the call; they are processed in
        descending order so earlier removals never move a pending index.
        """
        for i in sorted(set(int(j) for j in indices), reverse=True):
            if not 0 <= i < self._n:
                raise IndexError(i)
            last = self._n - 1
            self._bucket_discard(self._keys[i], i)
            if i != last:
                for f in self._fields:
                    arr = getattr(self, "_" + f)
                    arr[i] = arr[last]
                k_last = self._keys[last]
                bucket = self.voxel_index[k_last]
                bucket[bucket.index(last)] = i
                self._keys[i] = k_last
            self._keys.pop()
            self._n -= 1

    def neighbors(self, key) -> list[int]:
        return self.voxel_index.get(tuple(key), [])

    def check_index(self) -> None:
        """Assert the voxel-hash invariants; raises ``AssertionError`` on violation."""
        seen = 0
        for k, bucket in self.voxel_index.items():
            assert bucket, f"empty bucket {k}"
            for i in bucket:
                assert voxel_key(self._mu[i], self.voxel_size) == k, f"primitive {i} misfiled in {k}"
            seen += len(bucket)
        assert seen == self._n, f"{seen} indexed vs {self._n} primitives"
        flat = sorted(i for b in self.voxel_index.values() for i in b)
        assert flat == list(range(self._n)), "each primitive must appear exactly once"

    def nbytes(self) -> int:
        return sum(getattr(self, "_" + f)[: self._n].nbytes for f in self._fields)
