"""Image, trajectory and segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import CameraPose, InvalidArgumentError, canonical_quat

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class DegenerateConfigurationError(ValueError):
    """Point sets too degenerate (collinear, coincident) for a unique alignment."""


# ---------------------------------------------------------------------------
# images


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 2D correlation over fully-covered positions only."""
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), data range 1.

    Statistics are taken over window positions that lie fully inside the
    image; the map is averaged over positions and channels.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise InvalidArgumentError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    g = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    indices: list[int]
    poses: list[CameraPose]

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        if len(self.indices) != len(self.poses):
            raise InvalidArgumentError("one index per pose is required")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise InvalidArgumentError("trajectory indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    @classmethod
    def from_poses(cls, poses: Sequence[CameraPose], start: int = 1) -> "Trajectory":
        return cls(list(range(start, start + len(poses))), list(poses))

    def transformed(self, s: float, R: np.ndarray, t: np.ndarray) -> "Trajectory":
        """Apply ``x -> s R x + t`` to the whole trajectory (camera orientations rotate by R)."""
        return Trajectory(self.indices, [CameraPose(R @ p.rotation, s * R @ p.translation + t) for p in self.poses])


def umeyama_sim3(src, dst) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity ``dst ~ s R src + t`` (closed form, reflection-corrected)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidArgumentError("point sets must have the same shape")
    n = len(src)
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("source points are coincident or collinear")
    var_s = np.sum(xs * xs) / n
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def _check_matched(pred: Trajectory, gt: Trajectory) -> None:
    if pred.indices != gt.indices:
        raise InvalidArgumentError("trajectories must have identical frame indices")


def align_sim3(pred: Trajectory, gt: Trajectory) -> Trajectory:
    s, R, t = umeyama_sim3(pred.positions, gt.positions)
    return pred.transformed(s, R, t)


def ate(pred: Trajectory, gt: Trajectory) -> float:
    """RMSE of camera positions after Sim(3) alignment of ``pred`` onto ``gt``."""
    _check_matched(pred, gt)
    aligned = align_sim3(pred, gt)
    r = aligned.positions - gt.positions
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation; atan2 stays accurate near zero where arccos does not."""
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(R) - 1.0))))


def _relative_errors(pred: Trajectory, gt: Trajectory, delta: int, align: bool):
    _check_matched(pred, gt)
    if delta < 1:
        raise InvalidArgumentError("delta must be >= 1")
    if len(gt) <= delta:
        raise InvalidArgumentError(f"need more than {delta} poses")
    p = align_sim3(pred, gt) if align else pred
    et, er = [], []
    for i in range(len(gt) - delta):
        dp = p.poses[i].inverse().compose(p.poses[i + delta])
        dg = gt.poses[i].inverse().compose(gt.poses[i + delta])
        e = dg.inverse().compose(dp)
        et.append(np.linalg.norm(e.translation))
        er.append(rotation_angle_deg(e.rotation))
    return np.array(et), np.array(er)


def rpe_trans(pred: Trajectory, gt: Trajectory, delta: int = 1, align: bool = True) -> float:
    """RMSE of relative-motion translation errors over frame pairs ``delta`` apart."""
    et, _ = _relative_errors(pred, gt, delta, align)
    return float(np.sqrt(np.mean(et ** 2)))


def rpe_rot(pred: Trajectory, gt: Trajectory, delta: int = 1, align: bool = True) -> float:
    """RMSE of relative-motion rotation errors, degrees."""
    _, er = _relative_errors(pred, gt, delta, align)
    return float(np.sqrt(np.mean(er ** 2)))


# ---------------------------------------------------------------------------
# open-vocabulary segmentation


@dataclass(frozen=True)
class TextQuery:
    label: str
    embedding: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(e)) or not np.linalg.norm(e) > 0:
            raise InvalidArgumentError(f"query {self.label!r} has a zero or non-finite embedding")
        object.__setattr__(self, "embedding", e)


def cosine_map(feature_map, embedding) -> np.ndarray:
    f = np.asarray(feature_map, dtype=np.float64)
    e = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if f.shape[-1] != e.shape[0]:
        raise InvalidArgumentError(f"feature width {f.shape[-1]} does not match embedding width {e.shape[0]}")
    fn = np.linalg.norm(f, axis=-1)
    dot = f @ e
    return np.where(fn > 0, dot / np.where(fn > 0, fn, 1.0) / np.linalg.norm(e), 0.0)


def segment_query(feature_map, query: TextQuery, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask ``cos > threshold`` and the per-pixel cosine confidence."""
    conf = cosine_map(feature_map, query.embedding)
    return conf > threshold, conf


def miou_macc(pred: Mapping[str, np.ndarray], gt: Mapping[str, np.ndarray]) -> tuple[float, float]:
    """Mean IoU and mean accuracy (percent) over labels.

    A label whose prediction and ground truth are both empty is skipped; the
    accuracy of a label is the fraction of its ground-truth pixels that are
    predicted, so labels with an empty ground truth do not enter the mAcc mean.
    """
    ious, accs = [], []
    for label, g in gt.items():
        if label not in pred:
            raise InvalidArgumentError(f"no prediction for label {label!r}")
        p, g = np.asarray(pred[label], dtype=bool), np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise InvalidArgumentError(f"mask shapes differ for {label!r}: {p.shape} vs {g.shape}")
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        inter = np.logical_and(p, g).sum()
        ious.append(inter / union)
        if g.any():
            accs.append(inter / g.sum())
    if not ious:
        raise InvalidArgumentError("no label has a non-empty prediction or ground truth")
    return 100.0 * float(np.mean(ious)), (100.0 * float(np.mean(accs)) if accs else float("nan"))


def quaternion_distance(a: CameraPose, b: CameraPose) -> float:
    qa, qb = canonical_quat(a.quat()), canonical_quat(b.quat())
    return float(min(np.linalg.norm(qa - qb), np.linalg.norm(qa + qb)))
