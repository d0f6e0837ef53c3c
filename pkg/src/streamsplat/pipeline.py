"""Online reconstruction: one forward pass per incoming frame.

Each step encodes the new frame, runs the two-view relative stage against the
cached previous frame, updates the fixed-size anchor state, regresses global
per-pixel Gaussians conditioned on the resulting pose token and fuses them
into the accumulated scene.  The recurrent state is the anchor token matrix
plus one cached frame, so its size never depends on the stream length.

Frame 1 has no partner frame.  It runs the anchor update with the encoder
tokens standing in for the relative features and the stored ``p1`` token
standing in for the relative pose token, then runs the global heads
conditioned on the stored ``pg_init`` token.  Its global pose is the identity
by definition (the first frame fixes the coordinate system).
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CameraPose, GaussianScene, InvalidArgumentError, Intrinsics
from .formats import read_kv
from .fuse import FusionMlp, FusionReport, integrate_frame
from .netcore import (GaussianMaps, NetConfig, TokenGrid, WeightContainer, anchor_decode, decode_gs,
                      dual_decode, encode_image, head_gs, head_pos, head_pose)


@dataclass(frozen=True)
class PipelineConfig:
    height: int = 32
    width: int = 32
    d: int = 64
    patch: int = 8
    heads: int = 2
    enc_blocks: int = 2
    dec_blocks: int = 2
    glob_blocks: int = 2
    anchors: int = 64
    K: int = 16
    head_channels: int = 16
    scale_base: float = 0.01
    voxel_size: float = 0.05
    seed: int = 0
    weights: str = ""
    fov_deg: float = 60.0
    fusion: str = "attributes"       # "attributes", "latent" or "off"

    def __post_init__(self):
        if self.fusion not in ("attributes", "latent", "off"):
            raise InvalidArgumentError(f"unknown fusion wiring {self.fusion!r}")
        if not self.voxel_size > 0:
            raise InvalidArgumentError("voxel_size must be positive")

    def net(self) -> NetConfig:
        return NetConfig(height=self.height, width=self.width, d=self.d, patch=self.patch, heads=self.heads,
                         enc_blocks=self.enc_blocks, dec_blocks=self.dec_blocks, glob_blocks=self.glob_blocks,
                         anchors=self.anchors, K=self.K, head_channels=self.head_channels,
                         scale_base=self.scale_base)

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.fov_deg)

    @classmethod
    def from_mapping(cls, values: dict, source: str = "<config>") -> "PipelineConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise InvalidArgumentError(f"{source}: unknown config key {key!r}")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                kwargs[key] = conv(raw)
            except ValueError as exc:
                raise InvalidArgumentError(f"{source}: bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_mapping(read_kv(path), source=str(path))

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class PipelineState:
    anchor: np.ndarray                      # (M, d) anchor tokens
    prev_tokens: TokenGrid | None = None    # encoder tokens of the previous frame
    prev_image: np.ndarray | None = None
    frame_index: int = 0

    def nbytes(self) -> int:
        n = self.anchor.nbytes
        if self.prev_tokens is not None:
            n += self.prev_tokens.nbytes
        if self.prev_image is not None:
            n += self.prev_image.nbytes
        return n

    @property
    def token_count(self) -> int:
        return self.anchor.shape[0]


@dataclass
class StageOutputs:
    X: np.ndarray            # (H, W, 3) centers
    C: np.ndarray            # (H, W) confidences > 1
    gs: GaussianMaps
    pose: CameraPose
    pose_raw: np.ndarray | None = None


@dataclass
class FrameOutputs:
    index: int
    relative: StageOutputs | None           # current frame, previous-frame coordinates
    relative_prev: StageOutputs | None      # previous frame, same coordinates
    glob: StageOutputs
    gaussians_global: GaussianScene
    fusion: FusionReport | None = None
    seconds: float = 0.0


def initial_state(weights: WeightContainer) -> PipelineState:
    return PipelineState(anchor=weights["tokens.anchors"].copy())


def maps_to_scene(X: np.ndarray, C: np.ndarray, gs: GaussianMaps, voxel_size: float,
                  with_latent: bool = False) -> GaussianScene:
    """One Gaussian per pixel, row-major pixel order."""
    n = X.shape[0] * X.shape[1]
    K = gs.lang.shape[-1]
    scene = GaussianScene(K=K, voxel_size=voxel_size, capacity=n,
                          latent_dim=gs.raw.shape[-1] if with_latent else 0)
    scene.append(X.reshape(n, 3), gs.rot.reshape(n, 4), gs.scale.reshape(n, 3), gs.opacity.reshape(n),
                 gs.color.reshape(n, 3), gs.lang.reshape(n, K), C.reshape(n),
                 latent=gs.raw.reshape(n, -1) if with_latent else None)
    return scene


class StreamEngine:
    """Weights, configuration and accumulated scene for one stream."""

    def __init__(self, config: PipelineConfig | None = None, weights: WeightContainer | None = None):
        self.config = config or PipelineConfig()
        net = self.config.net()
        if weights is None:
            if self.config.weights:
                weights = WeightContainer.load(self.config.weights, expect=net)
            else:
                weights = WeightContainer.initialize(net, seed=self.config.seed)
        elif weights.cfg != net:
            raise InvalidArgumentError("weights were built for a different architecture")
        self.weights = weights
        w = weights
        self.mlp = FusionMlp(w["fusion_mlp.w1"], w["fusion_mlp.b1"], w["fusion_mlp.w2"], w["fusion_mlp.b2"])
        self.state = initial_state(weights)
        latent = self.config.fusion == "latent"
        self.scene = GaussianScene(K=net.K, voxel_size=self.config.voxel_size,
                                   capacity=net.height * net.width,
                                   latent_dim=net.gs_channels if latent else 0)
        self.trajectory: list[CameraPose] = []

    # -- stages ------------------------------------------------------------
    def relative_stage(self, feats: TokenGrid, prev_feats: TokenGrid):
        w = self.weights
        cur = np.vstack([w["tokens.p1"][None], feats.tokens])
        prev = np.vstack([w["tokens.p0"][None], prev_feats.tokens])
        a, b = dual_decode(cur, prev, w)
        p_rel = a[0]
        refined = TokenGrid(a[1:], feats.grid_shape)
        refined_prev = TokenGrid(b[1:], prev_feats.grid_shape)   # b[0] is computed and unused
        pose, raw = head_pose(p_rel, w, "rel")
        X, C = head_pos(refined, refined_prev, w, "rel")
        rel = StageOutputs(X, C, head_gs(refined, refined_prev, w, "rel"), pose, raw)
        Xp, Cp = head_pos(refined_prev, refined, w, "rel")
        rel_prev = StageOutputs(Xp, Cp, head_gs(refined_prev, refined, w, "rel"), CameraPose.identity())
        return p_rel, refined, rel, rel_prev

    def anchor_update(self, feats: TokenGrid, refined: TokenGrid, p_rel: np.ndarray, anchor: np.ndarray):
        """Pooled current and refined tokens plus the relative pose token interact with the anchor state."""
        compact = np.vstack([feats.pooled(), refined.pooled(), p_rel])
        x, s = anchor_decode(compact, anchor, self.weights)
        if s.shape != anchor.shape:
            raise AssertionError("anchor state changed size")
        return x[2], s

    def global_stage(self, refined: TokenGrid, p_glob: np.ndarray, first: bool) -> StageOutputs:
        w = self.weights
        X, C = head_pos(refined, p_glob, w, "glob")
        gs = head_gs(refined, p_glob, w, "glob")
        if first:
            pose, raw = CameraPose.identity(), None
        else:
            pose, raw = head_pose(p_glob, w, "glob")
        return StageOutputs(X, C, gs, pose, raw)

    # -- driver ------------------------------------------------------------
    def step(self, image: np.ndarray) -> FrameOutputs:
        out, self.state = step(image, self.state, self)
        return out

    def _decoder(self, latents: np.ndarray):
        rot, scale, opacity, color, lang = decode_gs(latents, self.weights.cfg.scale_base, self.weights.cfg.K)
        return scale, rot, opacity, color, lang


def step(image, state: PipelineState, engine: StreamEngine) -> tuple[FrameOutputs, PipelineState]:
    """Advance the stream by one frame; fuses into ``engine.scene`` and returns the new state."""
    t0 = time.perf_counter()
    cfg = engine.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.height, cfg.width, 3):
        raise InvalidArgumentError(f"frame shape {image.shape} does not match config "
                                   f"({cfg.height}, {cfg.width}, 3)")
    w = engine.weights
    feats = encode_image(image, w)
    first = state.prev_tokens is None
    if first:
        p_rel, refined, rel, rel_prev = w["tokens.p1"], feats, None, None
    else:
        p_rel, refined, rel, rel_prev = engine.relative_stage(feats, state.prev_tokens)
    p_glob, anchor = engine.anchor_update(feats, refined, p_rel, state.anchor)
    if first:
        p_glob = w["tokens.pg_init"]
    glob = engine.global_stage(refined, p_glob, first)

    latent = cfg.fusion == "latent"
    frame_scene = maps_to_scene(glob.X, glob.C, glob.gs, cfg.voxel_size, with_latent=latent)
    if cfg.fusion == "off":
        a = frame_scene.arrays()
        engine.scene.append(*(a[k] for k in ("mu", "rot", "scale", "opacity", "color", "lang", "confidence")),
                            validate=False)
        report = FusionReport(incoming=len(frame_scene), appended=len(frame_scene), count=len(engine.scene))
    else:
        report = integrate_frame(engine.scene, frame_scene, engine.mlp,
                                 decoder=engine._decoder if latent else None)
    engine.trajectory.append(glob.pose)

    new_state = PipelineState(anchor=anchor, prev_tokens=feats, prev_image=image, frame_index=state.frame_index + 1)
    out = FrameOutputs(new_state.frame_index, rel, rel_prev, glob, frame_scene, report,
                       time.perf_counter() - t0)
    return out, new_state


@dataclass
class StreamResult:
    scene: GaussianScene
    trajectory: list[CameraPose]
    reports: list[dict] = field(default_factory=list)
    state: PipelineState | None = None
    outputs: list[FrameOutputs] = field(default_factory=list)


def run_stream(frames, config: PipelineConfig | None = None, weights: WeightContainer | None = None,
               keep_outputs: bool = False) -> StreamResult:
    """Fold :func:`step` over ``frames`` (an iterable of HxWx3 arrays in [0, 1])."""
    engine = StreamEngine(config, weights)
    reports = []
    outputs = []
    for image in frames:
        out = engine.step(image)
        reports.append({
            "frame": out.index, "incoming": out.fusion.incoming, "merges": out.fusion.merges,
            "absorbed": out.fusion.absorbed, "primitives": out.fusion.count,
            "state_bytes": engine.state.nbytes(), "anchor_tokens": engine.state.token_count,
            "seconds": out.seconds,
        })
        if keep_outputs:
            outputs.append(out)
    if not reports:
        raise InvalidArgumentError("stream is empty")
    return StreamResult(engine.scene, engine.trajectory, reports, engine.state, outputs)


def load_frames(paths) -> list[np.ndarray]:
    from .formats import read_image
    return [read_image(Path(p)) for p in paths]
