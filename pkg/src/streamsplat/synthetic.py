"""Synthetic scenes and streams with known poses, labels and features.

The reference scene is a textured box and a sphere, both built from Gaussians
on their surfaces.  Each object carries one basis vector as its language
feature (box ``e0``, sphere ``e1``), so rendered features are exactly
``alpha * e_k`` wherever only one object contributes.  The generator checks
that the two objects' screen-space supports are disjoint in every rendered
view; ground-truth masks are the pixels with non-zero per-object alpha.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CameraPose, GaussianScene, Intrinsics, InvalidArgumentError
from .formats import write_features, write_ogs, write_pgm, write_ppm, write_tum
from .render import RenderTarget, rasterize

LABELS = ("box", "sphere")


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def box_gaussians(rng, center, half: float, per_face: int, K: int, label: int):
    pts = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            uv = rng.uniform(-half, half, (per_face, 2))
            p = np.empty((per_face, 3))
            others = [a for a in range(3) if a != axis]
            p[:, axis] = sign * half
            p[:, others[0]] = uv[:, 0]
            p[:, others[1]] = uv[:, 1]
            pts.append(p)
    pts = np.concatenate(pts) + center
    n = len(pts)
    # checker texture on the box faces
    rel = pts - center
    check = (np.floor(rel / (half / 2)).sum(axis=1) % 2).reshape(-1, 1)
    color = np.where(check > 0, [0.85, 0.25, 0.2], [0.95, 0.75, 0.3]) + rng.uniform(-0.03, 0.03, (n, 3))
    return _pack(rng, pts, color, half * 0.12, K, label)


def sphere_gaussians(rng, center, radius: float, count: int, K: int, label: int):
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = center + radius * d
    color = np.clip(0.5 + 0.4 * np.stack([0.2 * d[:, 0], d[:, 1], -d[:, 2]], axis=1) * [1, 0.5, 0.5]
                    + [-0.3, 0.1, 0.2], 0, 1)
    return _pack(rng, pts, color, radius * 0.15, K, label)


def _pack(rng, pts, color, size, K, label):
    n = len(pts)
    lang = np.zeros((n, K))
    lang[:, label] = 1.0
    return dict(mu=pts, rot=_random_quats(rng, n), scale=rng.uniform(0.6, 1.2, (n, 3)) * size,
                opacity=rng.uniform(0.7, 0.95, n), color=np.clip(color, 0, 1), lang=lang,
                confidence=np.ones(n))


@dataclass
class SyntheticScene:
    scene: GaussianScene
    parts: dict[str, GaussianScene]
    labels: tuple[str, ...] = LABELS
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)


def two_object_scene(K: int = 16, seed: int = 0, density: int = 1) -> SyntheticScene:
    """Box (label 0) and sphere (label 1) side by side around the origin."""
    if K < 2:
        raise InvalidArgumentError("K must be at least 2 for two orthogonal labels")
    rng = np.random.default_rng(seed)
    parts = {
        "box": box_gaussians(rng, np.array([-0.42, 0.0, 0.0]), 0.2, 25 * density, K, 0),
        "sphere": sphere_gaussians(rng, np.array([0.42, 0.0, 0.0]), 0.22, 150 * density, K, 1),
    }
    scenes = {k: GaussianScene.from_arrays(**v) for k, v in parts.items()}
    merged = {f: np.concatenate([parts[k][f] for k in LABELS]) for f in parts["box"]}
    emb = {lab: np.eye(K)[i] for i, lab in enumerate(LABELS)}
    return SyntheticScene(GaussianScene.from_arrays(**merged), scenes, LABELS, emb)


def orbit_cameras(n: int, radius: float = 2.2, arc_deg: float = 30.0, elevation: float = 0.3,
                  target=(0.0, 0.0, 0.0)) -> list[CameraPose]:
    """Cameras on an arc in front of the scene (looking along +z), all facing ``target``."""
    angles = np.deg2rad(np.linspace(-arc_deg / 2, arc_deg / 2, n)) if n > 1 else np.zeros(1)
    cams = []
    for a in angles:
        eye = np.array([radius * np.sin(a), -elevation, -radius * np.cos(a)])
        cams.append(CameraPose.look_at(eye, target))
    return cams


def relative_to_first(poses: list[CameraPose]) -> list[CameraPose]:
    """Re-express world-from-camera poses in the first camera's frame."""
    inv0 = poses[0].inverse()
    return [inv0.compose(p) for p in poses]


def gt_masks(synth: SyntheticScene, cam: CameraPose, intr: Intrinsics) -> dict[str, np.ndarray]:
    masks = {k: rasterize(s, cam, intr).alpha > 0 for k, s in synth.parts.items()}
    overlap = np.logical_and(*masks.values())
    if overlap.any():
        raise InvalidArgumentError(f"objects overlap on {int(overlap.sum())} pixels in this view")
    return masks


def render_views(scene: GaussianScene, cams, intr: Intrinsics) -> list[RenderTarget]:
    return [rasterize(scene, c, intr) for c in cams]


def write_dataset(out_dir, frames: int = 8, size: int = 32, K: int = 16, seed: int = 0,
                  fov_deg: float = 60.0) -> Path:
    """Write a self-describing stream: frames, poses, features, masks and queries.

    Poses are stored relative to the first camera, so frame 1 is the identity.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    synth = two_object_scene(K=K, seed=seed)
    intr = Intrinsics.from_fov(size, size, fov_deg)
    cams = orbit_cameras(frames)
    entries = []
    for i, cam in enumerate(cams, 1):
        t = rasterize(synth.scene, cam, intr)
        name = f"{i:04d}"
        write_ppm(out / "frames" / f"{name}.ppm", t.color)
        write_features(out / "features" / f"{name}.feat", t.feature)
        masks = gt_masks(synth, cam, intr)
        for lab, m in masks.items():
            write_pgm(out / "masks" / f"{name}_{lab}.pgm", m)
        entries.append({"frame": f"frames/{name}.ppm", "features": f"features/{name}.feat",
                        "masks": {lab: f"masks/{name}_{lab}.pgm" for lab in masks}})
    write_ogs(out / "scene.ogs", synth.scene)
    write_tum(out / "gt_world.tum", range(1, frames + 1), cams)
    write_tum(out / "gt.tum", range(1, frames + 1), relative_to_first(cams))
    (out / "queries.json").write_text(json.dumps({k: v.tolist() for k, v in synth.embeddings.items()},
                                                 indent=1) + "\n")
    manifest = {
        "version": 1,
        "frames": [e["frame"] for e in entries],
        "features": [e["features"] for e in entries],
        "masks": [e["masks"] for e in entries],
        "intrinsics": intr.as_dict(),
        "gt_trajectory": "gt.tum",
        "gt_world_trajectory": "gt_world.tum",
        "queries": "queries.json",
        "scene": "scene.ogs",
        "config": {"height": size, "width": size, "K": K, "seed": seed, "fov_deg": fov_deg},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out / "manifest.json"


def random_init(n: int, bounds_lo, bounds_hi, K: int = 16, seed: int = 0, scale: float = 0.05) -> GaussianScene:
    """Random Gaussians in an axis-aligned box, a starting point for direct optimisation."""
    rng = np.random.default_rng(seed)
    mu = rng.uniform(bounds_lo, bounds_hi, (n, 3))
    return GaussianScene.from_arrays(mu, _random_quats(rng, n), np.full((n, 3), scale), np.full(n, 0.5),
                                     rng.uniform(0.2, 0.8, (n, 3)), np.zeros((n, K)))
