"""Readers and writers for the on-disk formats.

OGS v1 scene file (all integers and floats little-endian)::

    offset  size  field
    0       8     magic  b"OGSPLAT\\0"
    8       4     u32    format version (1)
    12      4     u32    reserved, always 0
    16      4     u32    K, language-feature width
    20      8     u64    primitive count N
    28      ...   N records of (15 + K) f32 values:
                  mu(3) rot(4) scale(3) opacity(1) color(3) lang(K) confidence(1)

Quaternions are written canonicalised (w >= 0).  Reading widens to float64,
so write -> read -> write reproduces the file bit for bit.

Feature planes: one ASCII header line ``OGSFEAT 1 <H> <W> <K>\\n`` followed by
K planes of H*W little-endian f32 values, plane-major then row-major.

TUM trajectories: one line per frame ``index tx ty tz qx qy qz qw`` with
values printed to 9 decimals.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .core import CameraPose, GaussianScene, InvalidArgumentError, canonical_quat, DEFAULT_VOXEL_SIZE

OGS_MAGIC = b"OGSPLAT\x00"
OGS_VERSION = 1
_OGS_HEADER = struct.Struct("<8sII")
_OGS_COUNTS = struct.Struct("<IQ")


class FormatError(ValueError):
    """A file could not be parsed; the message names the file and location."""


# ---------------------------------------------------------------------------
# OGS scenes


def ogs_bytes(scene: GaussianScene) -> bytes:
    n = len(scene)
    rec = np.concatenate([
        scene.mu, canonical_quat(scene.rot), scene.scale, scene.opacity[:, None],
        scene.color, scene.lang, scene.confidence[:, None],
    ], axis=1) if n else np.zeros((0, 15 + scene.K))
    head = _OGS_HEADER.pack(OGS_MAGIC, OGS_VERSION, 0) + _OGS_COUNTS.pack(scene.K, n)
    return head + rec.astype("<f4").tobytes()


def write_ogs(path, scene: GaussianScene) -> None:
    Path(path).write_bytes(ogs_bytes(scene))


def parse_ogs(data: bytes, voxel_size: float = DEFAULT_VOXEL_SIZE, source: str = "<bytes>") -> GaussianScene:
    if len(data) < _OGS_HEADER.size + _OGS_COUNTS.size:
        raise FormatError(f"{source}: truncated OGS header")
    magic, version, _ = _OGS_HEADER.unpack_from(data, 0)
    if magic != OGS_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != OGS_VERSION:
        raise FormatError(f"{source}: unsupported OGS version {version}")
    K, n = _OGS_COUNTS.unpack_from(data, _OGS_HEADER.size)
    width = 15 + K
    body = data[_OGS_HEADER.size + _OGS_COUNTS.size:]
    if len(body) != 4 * width * n:
        raise FormatError(f"{source}: expected {4 * width * n} payload bytes, found {len(body)}")
    rec = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float64)
    try:
        return GaussianScene.from_arrays(
            rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10], rec[:, 11:14],
            rec[:, 14:14 + K], rec[:, 14 + K], voxel_size=voxel_size)
    except InvalidArgumentError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def read_ogs(path, voxel_size: float = DEFAULT_VOXEL_SIZE) -> GaussianScene:
    return parse_ogs(Path(path).read_bytes(), voxel_size=voxel_size, source=str(path))


# ---------------------------------------------------------------------------
# netpbm


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def ppm_bytes(img: np.ndarray) -> bytes:
    """Encode an H x W x 3 image (floats in [0, 1] or uint8) as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError(f"PPM needs an HxWx3 image, got {img.shape}")
    data = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise InvalidArgumentError(f"PGM needs an HxW image, got {img.shape}")
    if img.dtype == np.bool_:
        data = img.astype(np.uint8) * 255
    elif img.dtype == np.uint8:
        data = img
    else:
        data = to_uint8(img)
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def write_ppm(path, img) -> None:
    Path(path).write_bytes(ppm_bytes(img))


def write_pgm(path, img) -> None:
    Path(path).write_bytes(pgm_bytes(img))


def _parse_netpbm(data: bytes, magic: bytes, channels: int, source: str) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise FormatError(f"{source}: expected {magic.decode()} got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{source}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{source}: only maxval 255 is supported")
    payload = data[pos:]
    if len(payload) != w * h * channels:
        raise FormatError(f"{source}: expected {w * h * channels} pixel bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> uint8 array (H, W, 3)."""
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3, str(path)).copy()


def read_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1, str(path)).copy()


def read_image(path) -> np.ndarray:
    """Load a PPM as float64 in [0, 1]."""
    return read_ppm(path).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# feature planes


def feature_bytes(feat: np.ndarray) -> bytes:
    feat = np.asarray(feat)
    if feat.ndim != 3:
        raise InvalidArgumentError(f"feature map must be HxWxK, got {feat.shape}")
    h, w, k = feat.shape
    planes = np.ascontiguousarray(np.moveaxis(feat, 2, 0)).astype("<f4")
    return f"OGSFEAT 1 {h} {w} {k}\n".encode("ascii") + planes.tobytes()


def write_features(path, feat) -> None:
    Path(path).write_bytes(feature_bytes(feat))


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing feature header")
    parts = data[:nl].split()
    if len(parts) != 5 or parts[0] != b"OGSFEAT" or parts[1] != b"1":
        raise FormatError(f"{path}: bad feature header {data[:nl]!r}")
    h, w, k = (int(p) for p in parts[2:])
    body = data[nl + 1:]
    if len(body) != 4 * h * w * k:
        raise FormatError(f"{path}: expected {4 * h * w * k} payload bytes, found {len(body)}")
    planes = np.frombuffer(body, dtype="<f4").reshape(k, h, w)
    return np.moveaxis(planes, 0, 2).astype(np.float64)


# ---------------------------------------------------------------------------
# TUM trajectories


def _fmt(v: float) -> str:
    s = f"{v:.9f}"
    return "0.000000000" if s == "-0.000000000" else s


def tum_text(indices, poses) -> str:
    lines = []
    for i, p in zip(indices, poses):
        w, x, y, z = p.quat()
        t = p.translation
        lines.append(" ".join([str(int(i))] + [_fmt(v) for v in (t[0], t[1], t[2], x, y, z, w)]))
    return "\n".join(lines) + ("\n" if lines else "")


def write_tum(path, indices, poses) -> None:
    Path(path).write_text(tum_text(indices, poses))


def read_tum(path) -> tuple[list[int], list[CameraPose]]:
    indices, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, found {len(parts)}")
        try:
            idx = int(float(parts[0]))
            tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        q = np.array([qw, qx, qy, qz])
        if np.linalg.norm(q) < 1e-8:
            raise FormatError(f"{path}:{lineno}: zero quaternion")
        indices.append(idx)
        # keep the digits as read so that write -> read -> write is stable
        poses.append(CameraPose.from_quat_trans(q, [tx, ty, tz], keep_quat=True))
    return indices, poses


# ---------------------------------------------------------------------------
# plain-text key = value configuration


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), source=os.fspath(path))
