"""Toy-scale, forward-only transformer blocks and prediction heads (numpy).

Layer conventions, frozen so the weight file fully determines the numerics:

* linear layers compute ``x @ W + b`` with ``W`` stored as (in, out);
* layer norm uses eps 1e-6 with learned gain and bias;
* attention blocks are pre-norm: ``x + MHA(LN(x), LN'(ctx))`` then
  ``x + FFN(LN''(x))``; FFN is ``gelu_tanh(x W1 + b1) W2 + b2`` with hidden
  width ``ffn_mult * d``;
* decoder blocks are ``self-attn -> cross-attn -> FFN``, each a residual
  pre-norm sublayer;
* DPT-lite heads cross-attend the pixel tokens to a conditioning token set,
  reassemble two taps (block input and block output) to the pixel grid with a
  per-token linear "pixel shuffle", sum them and run ReLU, a 3x3 conv, ReLU and
  a 1x1 conv.

All compute is float64 on float32-stored weights.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import CameraPose, InvalidArgumentError, quat_to_rotmat_unchecked

LN_EPS = 1e-6


class DegeneratePoseError(ValueError):
    """The pose head produced a quaternion with (near) zero norm."""


class WeightMismatchError(ValueError):
    """A weight container does not match the configured architecture."""


@dataclass(frozen=True)
class NetConfig:
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
    ffn_mult: int = 2
    head_channels: int = 16
    scale_base: float = 0.01

    def __post_init__(self):
        if self.d % self.heads:
            raise InvalidArgumentError("d must be divisible by the head count")
        if self.d % 4:
            raise InvalidArgumentError("d must be divisible by 4 for the 2D position embedding")
        if self.height % self.patch or self.width % self.patch:
            raise InvalidArgumentError("image size must be divisible by the patch size")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def gs_channels(self) -> int:
        return 4 + 3 + 1 + 3 + self.K

    def describe(self) -> dict:
        out = asdict(self)
        out["layers"] = "prenorm-mha/gelu_tanh-ffn; decoder=self,cross,ffn; dpt-lite two-tap relu-conv3-relu-conv1"
        return out


@dataclass
class TokenGrid:
    tokens: np.ndarray              # (N, d)
    grid_shape: tuple[int, int]
    source: str = ""                # digest of the weights that produced it

    def __post_init__(self):
        if self.tokens.shape[0] != self.grid_shape[0] * self.grid_shape[1]:
            raise InvalidArgumentError("token count does not match grid shape")

    def pooled(self) -> np.ndarray:
        return self.tokens.mean(axis=0)

    @property
    def nbytes(self) -> int:
        return self.tokens.nbytes


# ---------------------------------------------------------------------------
# architecture and weights


def _attn_sections(prefix: str, d: int, cross: bool, ffn: bool, ffn_mult: int) -> dict[str, tuple]:
    s = {f"{prefix}.ln_q.g": (d,), f"{prefix}.ln_q.b": (d,)}
    if cross:
        s.update({f"{prefix}.ln_kv.g": (d,), f"{prefix}.ln_kv.b": (d,)})
    for p in ("q", "k", "v", "o"):
        s[f"{prefix}.w{p}"] = (d, d)
        s[f"{prefix}.b{p}"] = (d,)
    if ffn:
        s.update(_ffn_sections(prefix, d, ffn_mult))
    return s


def _ffn_sections(prefix: str, d: int, mult: int) -> dict[str, tuple]:
    return {f"{prefix}.ln_f.g": (d,), f"{prefix}.ln_f.b": (d,),
            f"{prefix}.ffn.w1": (d, mult * d), f"{prefix}.ffn.b1": (mult * d,),
            f"{prefix}.ffn.w2": (mult * d, d), f"{prefix}.ffn.b2": (d,)}


def _decoder_sections(prefix: str, cfg: NetConfig) -> dict[str, tuple]:
    s = _attn_sections(prefix + ".self", cfg.d, False, False, cfg.ffn_mult)
    s.update(_attn_sections(prefix + ".cross", cfg.d, True, False, cfg.ffn_mult))
    s.update(_ffn_sections(prefix, cfg.d, cfg.ffn_mult))
    return s


def _dpt_sections(prefix: str, cfg: NetConfig, out_ch: int) -> dict[str, tuple]:
    c, p = cfg.head_channels, cfg.patch
    s = _attn_sections(prefix + ".cond", cfg.d, True, True, cfg.ffn_mult)
    for tap in (0, 1):
        s[f"{prefix}.tap{tap}.w"] = (cfg.d, p * p * c)
        s[f"{prefix}.tap{tap}.b"] = (p * p * c,)
    s[f"{prefix}.conv3.w"] = (3, 3, c, c)
    s[f"{prefix}.conv3.b"] = (c,)
    s[f"{prefix}.conv1.w"] = (c, out_ch)
    s[f"{prefix}.conv1.b"] = (out_ch,)
    return s


def architecture(cfg: NetConfig) -> dict[str, tuple]:
    """Ordered section name -> shape map for a configuration."""
    d = cfg.d
    s: dict[str, tuple] = {
        "encoder.patch.w": (3 * cfg.patch * cfg.patch, d),
        "encoder.patch.b": (d,),
    }
    for i in range(cfg.enc_blocks):
        s.update(_attn_sections(f"encoder.block{i}", d, False, True, cfg.ffn_mult))
    for stream in ("cur", "prev"):
        for i in range(cfg.dec_blocks):
            s.update(_decoder_sections(f"dec_{stream}.block{i}", cfg))
    for stream in ("pose", "state"):
        for i in range(cfg.glob_blocks):
            s.update(_decoder_sections(f"glob_{stream}.block{i}", cfg))
    for stage in ("rel", "glob"):
        s.update(_dpt_sections(f"head_pos_{stage}", cfg, 4))
        s.update(_dpt_sections(f"head_gs_{stage}", cfg, cfg.gs_channels))
        s[f"head_pose_{stage}.w1"] = (d, d)
        s[f"head_pose_{stage}.b1"] = (d,)
        s[f"head_pose_{stage}.w2"] = (d, 7)
        s[f"head_pose_{stage}.b2"] = (7,)
    F = cfg.gs_channels
    s["fusion_mlp.w1"] = (2 * F, 2 * F)
    s["fusion_mlp.b1"] = (2 * F,)
    s["fusion_mlp.w2"] = (F, 2 * F)
    s["fusion_mlp.b2"] = (F,)
    s["tokens.p0"] = (d,)
    s["tokens.p1"] = (d,)
    s["tokens.pg_init"] = (d,)
    s["tokens.anchors"] = (cfg.anchors, d)
    return s


def manifest_hash(cfg: NetConfig) -> str:
    h = hashlib.sha256(json.dumps(cfg.describe(), sort_keys=True).encode())
    for name, shape in architecture(cfg).items():
        h.update(f"{name}:{'x'.join(map(str, shape))}\n".encode())
    return h.hexdigest()


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith("conv3.w"):
        return shape[0] * shape[1] * shape[2]
    if name.startswith("fusion_mlp.w"):
        return shape[1]  # (out, in) layout
    if name.startswith("fusion_mlp.b1"):
        return shape[0]
    if len(shape) == 2 and not name.startswith("tokens."):
        return shape[0]
    return shape[-1]


class WeightContainer:
    """Named float32 arrays plus the configuration they were built for.

    File layout::

        OGSWEIGHTS 1\\n
        arch <json config>\\n
        manifest <sha256 of config and section shapes>\\n
        sections <n>\\n
        <name> <d0xd1x...> <offset> <nbytes> <sha256[:16]>\\n   (n lines)
        end\\n
        <payload: sections back to back, little-endian f32, offsets from here>
    """

    MAGIC = "OGSWEIGHTS 1"

    def __init__(self, cfg: NetConfig, sections: dict[str, np.ndarray]):
        self.cfg = cfg
        expected = architecture(cfg)
        if list(sections) != list(expected):
            missing = set(expected) - set(sections)
            extra = set(sections) - set(expected)
            raise WeightMismatchError(f"section mismatch; missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, shape in expected.items():
            if tuple(sections[name].shape) != tuple(shape):
                raise WeightMismatchError(f"{name}: expected shape {shape}, got {sections[name].shape}")
        self.sections = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in sections.items()}
        for v in self.sections.values():
            v.setflags(write=False)
        self._f64: dict[str, np.ndarray] = {}

    @classmethod
    def initialize(cls, cfg: NetConfig, seed: int = 0) -> "WeightContainer":
        """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); layer-norm gains 1, biases 0."""
        sections = {}
        for name, shape in architecture(cfg).items():
            if ".ln_" in name:
                sections[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
                continue
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            sections[name] = rng.uniform(-bound, bound, shape)
        return cls(cfg, sections)

    def __getitem__(self, name: str) -> np.ndarray:
        arr = self._f64.get(name)
        if arr is None:
            arr = self.sections[name].astype(np.float64)
            arr.setflags(write=False)
            self._f64[name] = arr
        return arr

    def replace(self, **updates: np.ndarray) -> "WeightContainer":
        """Copy with some sections swapped (names use ``__`` for ``.``)."""
        sections = dict(self.sections)
        for k, v in updates.items():
            sections[k.replace("__", ".")] = np.asarray(v)
        return WeightContainer(self.cfg, sections)

    def with_sections(self, updates: dict[str, np.ndarray]) -> "WeightContainer":
        sections = dict(self.sections)
        sections.update({k: np.asarray(v) for k, v in updates.items()})
        return WeightContainer(self.cfg, sections)

    def section_hash(self, prefix: str) -> str:
        h = hashlib.sha256()
        for name in sorted(k for k in self.sections if k.startswith(prefix)):
            h.update(name.encode())
            h.update(self.sections[name].tobytes())
        return h.hexdigest()[:16]

    def to_bytes(self) -> bytes:
        lines = [self.MAGIC,
                 "arch " + json.dumps(self.cfg.describe(), sort_keys=True),
                 "manifest " + manifest_hash(self.cfg),
                 f"sections {len(self.sections)}"]
        offset = 0
        payload = []
        for name, arr in self.sections.items():
            raw = arr.tobytes()
            lines.append(f"{name} {'x'.join(map(str, arr.shape))} {offset} {len(raw)} "
                         f"{hashlib.sha256(raw).hexdigest()[:16]}")
            payload.append(raw)
            offset += len(raw)
        lines.append("end")
        return ("\n".join(lines) + "\n").encode("ascii") + b"".join(payload)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, expect: NetConfig | None = None, source: str = "<weights>") -> "WeightContainer":
        end = data.find(b"\nend\n")
        if not data.startswith(cls.MAGIC.encode()) or end < 0:
            raise WeightMismatchError(f"{source}: not a weight container")
        lines = data[:end].decode("ascii").split("\n")
        payload = data[end + len(b"\nend\n"):]
        arch = json.loads(lines[1][len("arch "):])
        arch.pop("layers", None)
        cfg = NetConfig(**arch)
        stored_hash = lines[2][len("manifest "):]
        if stored_hash != manifest_hash(cfg):
            raise WeightMismatchError(f"{source}: manifest hash does not match its architecture")
        if expect is not None and manifest_hash(expect) != stored_hash:
            raise WeightMismatchError(f"{source}: weights were built for a different architecture")
        n = int(lines[3].split()[1])
        sections = {}
        for line in lines[4:4 + n]:
            name, dims, off, nbytes, digest = line.split()
            off, nbytes = int(off), int(nbytes)
            raw = payload[off:off + nbytes]
            if len(raw) != nbytes or hashlib.sha256(raw).hexdigest()[:16] != digest:
                raise WeightMismatchError(f"{source}: section {name} is corrupt")
            shape = tuple(int(x) for x in dims.split("x")) if dims else ()
            sections[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        return cls(cfg, sections)

    @classmethod
    def load(cls, path, expect: NetConfig | None = None) -> "WeightContainer":
        return cls.from_bytes(Path(path).read_bytes(), expect=expect, source=str(path))


# ---------------------------------------------------------------------------
# primitives


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def multihead_attention(q_in, kv_in, w: WeightContainer, prefix: str, heads: int,
                        return_weights: bool = False):
    d = q_in.shape[-1]
    dh = d // heads
    Q = q_in @ w[prefix + ".wq"] + w[prefix + ".bq"]
    Kt = kv_in @ w[prefix + ".wk"] + w[prefix + ".bk"]
    V = kv_in @ w[prefix + ".wv"] + w[prefix + ".bv"]
    Q = Q.reshape(-1, heads, dh).transpose(1, 0, 2)
    Kt = Kt.reshape(-1, heads, dh).transpose(1, 0, 2)
    V = V.reshape(-1, heads, dh).transpose(1, 0, 2)
    A = softmax(Q @ Kt.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)
    out = (A @ V).transpose(1, 0, 2).reshape(-1, d)
    out = out @ w[prefix + ".wo"] + w[prefix + ".bo"]
    return (out, A) if return_weights else out


def _attn_sublayer(x, ctx, w, prefix, heads, cross):
    xn = layer_norm(x, w[prefix + ".ln_q.g"], w[prefix + ".ln_q.b"])
    cn = layer_norm(ctx, w[prefix + ".ln_kv.g"], w[prefix + ".ln_kv.b"]) if cross else xn
    return x + multihead_attention(xn, cn, w, prefix, heads)


def _ffn_sublayer(x, w, prefix):
    h = layer_norm(x, w[prefix + ".ln_f.g"], w[prefix + ".ln_f.b"])
    h = gelu(h @ w[prefix + ".ffn.w1"] + w[prefix + ".ffn.b1"])
    return x + h @ w[prefix + ".ffn.w2"] + w[prefix + ".ffn.b2"]


def _check_width(w: WeightContainer, *arrays):
    for a in arrays:
        if a.ndim != 2 or a.shape[1] != w.cfg.d:
            raise InvalidArgumentError(f"token width must be {w.cfg.d}, got shape {a.shape}")


def attention_block(queries: np.ndarray, context: np.ndarray | None, w: WeightContainer, prefix: str) -> np.ndarray:
    """Pre-norm attention + feed-forward block; ``context=None`` means self-attention."""
    cross = context is not None
    _check_width(w, queries, *( [context] if cross else []))
    x = _attn_sublayer(queries, context if cross else queries, w, prefix, w.cfg.heads, cross)
    return _ffn_sublayer(x, w, prefix)


def decoder_block(x: np.ndarray, other: np.ndarray, w: WeightContainer, prefix: str) -> np.ndarray:
    _check_width(w, x, other)
    x = _attn_sublayer(x, x, w, prefix + ".self", w.cfg.heads, False)
    x = _attn_sublayer(x, other, w, prefix + ".cross", w.cfg.heads, True)
    return _ffn_sublayer(x, w, prefix)


def position_embedding(gh: int, gw: int, d: int) -> np.ndarray:
    """Fixed 2D sinusoidal embedding: first half encodes rows, second half columns."""
    quarter = d // 4
    freq = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")

    def enc(pos):
        ang = pos.reshape(-1, 1) * freq[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([enc(rows), enc(cols)], axis=1)


# ---------------------------------------------------------------------------
# network stages


def patchify(image: np.ndarray, w: WeightContainer) -> TokenGrid:
    image = np.asarray(image, dtype=np.float64)
    p = w.cfg.patch
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"image must be HxWx3, got {image.shape}")
    h, wd = image.shape[:2]
    if h % p or wd % p:
        raise InvalidArgumentError(f"image size {h}x{wd} is not divisible by patch size {p}")
    gh, gw = h // p, wd // p
    patches = image.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * 3)
    tokens = patches @ w["encoder.patch.w"] + w["encoder.patch.b"] + position_embedding(gh, gw, w.cfg.d)
    return TokenGrid(tokens, (gh, gw))


def encode_image(image: np.ndarray, w: WeightContainer) -> TokenGrid:
    grid = patchify(image, w)
    x = grid.tokens
    for i in range(w.cfg.enc_blocks):
        x = attention_block(x, None, w, f"encoder.block{i}")
    return TokenGrid(x, grid.grid_shape, source=w.section_hash("encoder."))


def dual_decode(cur: np.ndarray, prev: np.ndarray, w: WeightContainer) -> tuple[np.ndarray, np.ndarray]:
    """Two weight-distinct decoder streams exchanging information by cross-attention.

    ``cur`` holds the current frame's tokens and ``prev`` the previous
    frame's, each led by its pose token.  In every block each stream
    self-attends, then cross-attends to the other stream's tokens as they
    were at the start of the block.
    """
    _check_width(w, cur, prev)
    a, b = cur, prev
    for i in range(w.cfg.dec_blocks):
        a, b = (decoder_block(a, b, w, f"dec_cur.block{i}"),
                decoder_block(b, a, w, f"dec_prev.block{i}"))
    return a, b


def anchor_decode(compact: np.ndarray, state: np.ndarray, w: WeightContainer) -> tuple[np.ndarray, np.ndarray]:
    """Pair of interconnected decoders: compact tokens query the state and vice versa."""
    _check_width(w, compact, state)
    x, s = compact, state
    for i in range(w.cfg.glob_blocks):
        x, s = (decoder_block(x, s, w, f"glob_pose.block{i}"),
                decoder_block(s, x, w, f"glob_state.block{i}"))
    return x, s


def _conv3x3(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(0, 1))  # H, W, C, 3, 3
    return np.einsum("hwcij,ijco->hwo", win, k, optimize=True) + b


def dpt_trunk(f_a: TokenGrid, cond: np.ndarray, w: WeightContainer, prefix: str) -> np.ndarray:
    cfg = w.cfg
    cond = np.atleast_2d(cond)
    _check_width(w, f_a.tokens, cond)
    taps = [f_a.tokens, attention_block(f_a.tokens, cond, w, prefix + ".cond")]
    gh, gw = f_a.grid_shape
    p, c = cfg.patch, cfg.head_channels
    x = 0.0
    for i, t in enumerate(taps):
        r = t @ w[f"{prefix}.tap{i}.w"] + w[f"{prefix}.tap{i}.b"]
        x = x + r.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, c)
    x = np.maximum(x, 0.0)
    x = np.maximum(_conv3x3(x, w[prefix + ".conv3.w"], w[prefix + ".conv3.b"]), 0.0)
    return x @ w[prefix + ".conv1.w"] + w[prefix + ".conv1.b"]


def _cond_tokens(f_b) -> np.ndarray:
    return f_b.tokens if isinstance(f_b, TokenGrid) else np.atleast_2d(np.asarray(f_b, dtype=np.float64))


def head_pos(f_a: TokenGrid, f_b, w: WeightContainer, stage: str = "rel") -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel centers (H, W, 3) and confidences (H, W), confidence = 1 + softplus > 1."""
    raw = dpt_trunk(f_a, _cond_tokens(f_b), w, f"head_pos_{stage}")
    return raw[..., :3], 1.0 + softplus(raw[..., 3])


@dataclass
class GaussianMaps:
    rot: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    lang: np.ndarray
    raw: np.ndarray = field(repr=False)


def decode_gs(raw: np.ndarray, scale_base: float, K: int) -> tuple[np.ndarray, ...]:
    """Activations mapping raw head channels to valid Gaussian attributes."""
    q = raw[..., 0:4]
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    ident = np.zeros_like(q)
    ident[..., 0] = 1.0
    rot = np.where(n > 1e-12, q / np.where(n > 1e-12, n, 1.0), ident)
    rot = rot * np.where(rot[..., :1] < 0.0, -1.0, 1.0)
    scale = np.maximum(scale_base * softplus(raw[..., 4:7]), 1e-6)
    opacity = sigmoid(raw[..., 7])
    color = sigmoid(raw[..., 8:11])
    lang = raw[..., 11:11 + K]
    return rot, scale, opacity, color, lang


def head_gs(f_a: TokenGrid, f_b, w: WeightContainer, stage: str = "rel") -> GaussianMaps:
    raw = dpt_trunk(f_a, _cond_tokens(f_b), w, f"head_gs_{stage}")
    rot, scale, opacity, color, lang = decode_gs(raw, w.cfg.scale_base, w.cfg.K)
    return GaussianMaps(rot, scale, opacity, color, lang, raw)


def pose_from_raw(raw) -> CameraPose:
    raw = np.asarray(raw, dtype=np.float64).reshape(7)
    q = raw[:4]
    n = np.linalg.norm(q)
    if not n >= 1e-8:
        raise DegeneratePoseError(f"pose quaternion norm {n:.3g} is degenerate")
    return CameraPose(quat_to_rotmat_unchecked(q / n), raw[4:])


def head_pose(p: np.ndarray, w: WeightContainer, stage: str = "rel") -> tuple[CameraPose, np.ndarray]:
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    _check_width(w, p)
    pre = f"head_pose_{stage}"
    h = np.maximum(p @ w[pre + ".w1"] + w[pre + ".b1"], 0.0)
    raw = (h @ w[pre + ".w2"] + w[pre + ".b2"])[0]
    return pose_from_raw(raw), raw
