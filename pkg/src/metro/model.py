"""Mesh-regression transformer: queries, masked vertex modeling, the
progressive-width encoder, output heads and the coarse-to-full upsampler.

Token widths follow a schedule ``[H+3, w1, ..., wn, 3]``. The queries have
width ``H+3``; a learned projection maps them into the first block, blocks
run at ``w1 .. wn`` with a learned projection between consecutive blocks,
and a per-token linear maps the last block's output to 3-D coordinates.
A schedule with no intermediate widths runs a single block at ``H+3``.

Checkpoint layout (little-endian)::

    b"MTRO" | u32 version | 32-byte SHA-256 of the config JSON
    | u32 config length | config JSON
    | u32 entry count | entries

    entry: u16 name length | name | u8 ndim | u32 * ndim shape | f4 * prod(shape)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .mesh import JointRegressor, TemplateMesh


@dataclass
class BlockSpec:
    hidden_dim: int
    layers: int
    heads: int


@dataclass
class EncoderConfig:
    feature_dim: int
    blocks: list[BlockSpec]
    output_dim: int = 3
    mvm_max_fraction: float = 0.3
    positional_mode: str = "template_coords"
    upsampler_hidden: int = 64
    feature_extractor: str = "precomputed"
    image_side: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]

    @property
    def query_dim(self) -> int:
        return self.feature_dim + 3

    @property
    def widths(self) -> list[int]:
        hidden = [b.hidden_dim for b in self.blocks]
        if hidden and hidden[0] == self.query_dim:
            return hidden + [self.output_dim]
        return [self.query_dim] + hidden + [self.output_dim]

    @property
    def total_layers(self) -> int:
        return sum(b.layers for b in self.blocks)

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.output_dim != 3:
            raise ConfigError("output_dim is fixed to 3")
        if not self.blocks:
            raise ConfigError("at least one encoder block is required")
        if self.blocks[0].hidden_dim > self.query_dim:
            raise ConfigError(f"first block width {self.blocks[0].hidden_dim} exceeds query width {self.query_dim}")
        w = self.widths
        if any(a <= b for a, b in zip(w, w[1:])):
            raise ConfigError(f"widths must strictly decrease, got {w}")
        for i, b in enumerate(self.blocks):
            if b.layers < 1 or b.heads < 1:
                raise ConfigError(f"block {i}: layers and heads must be positive")
            if b.hidden_dim % b.heads:
                raise ConfigError(f"block {i}: {b.heads} heads do not divide width {b.hidden_dim}")
        if not 0.0 <= self.mvm_max_fraction <= 1.0:
            raise ConfigError("mvm_max_fraction must lie in [0, 1]")
        if self.positional_mode not in ("template_coords", "sinusoidal"):
            raise ConfigError(f"unknown positional_mode {self.positional_mode!r}")
        if self.feature_extractor not in ("precomputed", "tiny_cnn"):
            raise ConfigError(f"unknown feature_extractor {self.feature_extractor!r}")

    @classmethod
    def default(cls, feature_dim: int = 2048, **kw) -> "EncoderConfig":
        """``(H+3) -> H/2 -> H/4 -> H/8 -> 3``: three blocks of 4 layers and 4 heads."""
        return cls.scheme(feature_dim, 3, **kw)

    @classmethod
    def scheme(cls, feature_dim: int, stages: int, total_layers: int = 12, heads: int = 4, **kw) -> "EncoderConfig":
        """Width schedule with ``stages`` halvings, layers split evenly across blocks.

        ``stages=0`` is the single-block baseline at width ``H+3``; its head
        count drops to the largest divisor of ``H+3`` not above ``heads``.
        """
        if stages == 0:
            d = feature_dim + 3
            h = max(c for c in range(1, heads + 1) if d % c == 0)
            blocks = [BlockSpec(d, total_layers, h)]
        else:
            if total_layers % stages:
                raise ConfigError(f"{total_layers} layers do not split evenly over {stages} blocks")
            blocks = [BlockSpec(feature_dim // 2 ** (i + 1), total_layers // stages, heads) for i in range(stages)]
        cfg = cls(feature_dim, blocks, **kw)
        cfg.validate()
        return cfg

    def describe(self) -> str:
        names = {self.query_dim: "(H+3)", self.output_dim: "3"}
        parts = []
        for w in self.widths:
            if w in names:
                parts.append(names[w])
            else:
                parts.append(f"H/{self.feature_dim // w}" if self.feature_dim % w == 0 else str(w))
        return " -> ".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class CameraParams:
    scale: float
    tx: float
    ty: float

    def as_array(self) -> np.ndarray:
        return np.array([self.scale, self.tx, self.ty])


@dataclass
class QuerySet:
    queries: ad.Tensor       # (B, K+M, H+3)
    masked: np.ndarray       # (B, K+M) bool
    n_joints: int

    @property
    def joint_queries(self) -> ad.Tensor:
        return ad.slice_(self.queries, 0, self.n_joints, axis=1)

    @property
    def vertex_queries(self) -> ad.Tensor:
        return ad.slice_(self.queries, self.n_joints, self.queries.shape[1], axis=1)

    @property
    def masked_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for m in self.masked]


@dataclass
class ModelOutput:
    joints3d: ad.Tensor            # (B, K, 3)
    coarse_vertices3d: ad.Tensor   # (B, M, 3)
    full_vertices3d: ad.Tensor     # (B, M_full, 3)
    camera: ad.Tensor              # (B, 3): scale (softplus'd), tx, ty
    tokens3d: ad.Tensor            # (B, K+M, 3) encoder output before splitting
    hidden: ad.Tensor              # (B, K+M, d_last) last block output
    attention: list = field(default_factory=list)  # per layer (B, heads, N, N) or None

    def camera_params(self, b: int = 0) -> CameraParams:
        s, tx, ty = (float(v) for v in self.camera.data[b])
        return CameraParams(s, tx, ty)


def sinusoidal_codes(n: int) -> np.ndarray:
    """3-value sinusoidal index code per position (base 10000)."""
    i = np.arange(n, dtype=np.float64)
    return np.stack([np.sin(i), np.cos(i), np.sin(i / 10000 ** (2 / 3))], axis=1)


def draw_mask(rng: np.random.Generator, batch: int, n: int, max_fraction: float) -> np.ndarray:
    """Per sample: fraction f ~ U(0, max_fraction), then ceil(f*n) distinct slots.

    The count is capped at floor(max_fraction * n) so the masked share never
    exceeds the cap.
    """
    mask = np.zeros((batch, n), dtype=bool)
    cap = math.floor(max_fraction * n + 1e-9)
    for b in range(batch):
        f = rng.uniform(0.0, max_fraction)
        count = min(math.ceil(f * n), cap)
        if count:
            mask[b, rng.choice(n, size=count, replace=False)] = True
    return mask


def build_queries(X, positions: np.ndarray, mask_token: ad.Tensor, n_joints: int,
                  rng: np.random.Generator | None = None, mvm_max_fraction: float = 0.0,
                  mask: np.ndarray | None = None) -> QuerySet:
    """Concatenate the feature vector with each position and apply masking.

    ``X`` is ``(B, H)`` (tensor or array); ``positions`` ``(K+M, 3)`` with
    joints first. Masking is drawn from ``rng`` unless an explicit ``mask``
    is given.
    """
    X = X if isinstance(X, ad.Tensor) else ad.Tensor(np.asarray(X), dtype=mask_token.dtype)
    if X.ndim == 1:
        X = ad.reshape(X, (1, -1))
    if not np.isfinite(X.data).all():
        raise NumericError("image feature contains non-finite values")
    B = X.shape[0]
    N = positions.shape[0]
    pos = ad.Tensor(np.broadcast_to(positions, (B, N, 3)).astype(mask_token.dtype))
    q = ad.concat([ad.repeat_rows(X, N), pos], axis=-1)
    if mask is None:
        if rng is not None:
            mask = draw_mask(rng, B, N, mvm_max_fraction)
        else:
            mask = np.zeros((B, N), dtype=bool)
    if mask.shape != (B, N):
        raise ShapeError(f"mask shape {mask.shape} != {(B, N)}")
    if mask.any():
        q = ad.mask_rows(q, mask, mask_token)
    return QuerySet(q, mask, n_joints)


def _trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def _f32_exact(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


class Metro:
    """The regressor; parameters live in the ordered dict ``params``."""

    def __init__(self, cfg: EncoderConfig, joint_positions: np.ndarray, vertex_positions: np.ndarray,
                 regressor: np.ndarray, upsample_map: np.ndarray | None = None,
                 seed: int = 0, dtype=None, init: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype or ad.get_default_dtype()).type
        # buffers hold float32 values (the checkpoint precision) so a reload reproduces them exactly
        self.joint_positions = _f32_exact(joint_positions)
        self.vertex_positions = _f32_exact(vertex_positions)
        self.regressor = _f32_exact(regressor)
        self.n_joints = len(self.joint_positions)
        self.n_coarse = len(self.vertex_positions)
        self.n_full = self.regressor.shape[1]
        if self.regressor.shape[0] != self.n_joints:
            raise ShapeError(f"regressor rows {self.regressor.shape[0]} != joints {self.n_joints}")
        self.params: dict[str, ad.Tensor] = {}
        self.extractor = None
        if init:
            self._init_params(np.random.default_rng(seed), upsample_map)

    @classmethod
    def from_template(cls, cfg: EncoderConfig, template: TemplateMesh, regressor: JointRegressor,
                      seed: int = 0, dtype=None) -> "Metro":
        joints = regressor.G @ template.full_vertices
        return cls(cfg, joints, template.coarse_vertices, regressor.G, template.upsample_map, seed, dtype)

    # -- parameters -------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = ad.Tensor(value, requires_grad=True, name=name, dtype=self.dtype)

    def _init_params(self, rng, upsample_map):
        cfg = self.cfg
        D = cfg.query_dim
        self._add("mask_token", _trunc_normal(rng, (D,)))
        widths = cfg.widths
        w_in = D
        for i, blk in enumerate(cfg.blocks):
            d = blk.hidden_dim
            if d != w_in:
                name = "enc.in" if i == 0 else f"enc.proj{i}"
                self._add(f"{name}.w", _trunc_normal(rng, (w_in, d)))
                self._add(f"{name}.b", np.zeros(d))
            for j in range(blk.layers):
                p = f"enc.b{i}.l{j}"
                self._add(f"{p}.ln1.g", np.ones(d))
                self._add(f"{p}.ln1.b", np.zeros(d))
                self._add(f"{p}.qkv.w", _trunc_normal(rng, (d, 3 * d)))
                self._add(f"{p}.qkv.b", np.zeros(3 * d))
                self._add(f"{p}.out.w", _trunc_normal(rng, (d, d)))
                self._add(f"{p}.out.b", np.zeros(d))
                self._add(f"{p}.ln2.g", np.ones(d))
                self._add(f"{p}.ln2.b", np.zeros(d))
                self._add(f"{p}.ffn1.w", _trunc_normal(rng, (d, 4 * d)))
                self._add(f"{p}.ffn1.b", np.zeros(4 * d))
                self._add(f"{p}.ffn2.w", _trunc_normal(rng, (4 * d, d)))
                self._add(f"{p}.ffn2.b", np.zeros(d))
            self._add(f"enc.b{i}.lnf.g", np.ones(d))
            self._add(f"enc.b{i}.lnf.b", np.zeros(d))
            w_in = d
        last = widths[-2]
        self._add("head.w", _trunc_normal(rng, (last, 3)))
        self._add("head.b", np.zeros(3))
        self._add("cam.w", _trunc_normal(rng, (last, 3)))
        self._add("cam.b", np.array([math.log(math.e - 1.0), 0.0, 0.0]))  # softplus -> scale 1
        M, Mf, U = self.n_coarse, self.n_full, cfg.upsampler_hidden
        if upsample_map is None:
            upsample_map = np.zeros((Mf, M))
            upsample_map[np.arange(Mf), np.arange(Mf) % M] = 1.0
        self._add("up.lin.w", np.kron(np.asarray(upsample_map).T, np.eye(3)))
        self._add("up.lin.b", np.zeros(3 * Mf))
        self._add("up.fc1.w", _trunc_normal(rng, (3 * M, U)))
        self._add("up.fc1.b", np.zeros(U))
        self._add("up.fc2.w", np.zeros((U, 3 * Mf)))
        self._add("up.fc2.b", np.zeros(3 * Mf))
        if cfg.feature_extractor == "tiny_cnn":
            from .synth import TinyCNN
            self.extractor = TinyCNN(cfg.feature_dim, seed=int(rng.integers(2 ** 31)), dtype=self.dtype)
            self.params.update(self.extractor.params)

    def _attach_extractor(self):
        if self.cfg.feature_extractor == "tiny_cnn":
            from .synth import TinyCNN
            self.extractor = TinyCNN.__new__(TinyCNN)
            self.extractor.dim = self.cfg.feature_dim
            self.extractor.params = {k: v for k, v in self.params.items() if k.startswith("cnn.")}

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def positions(self) -> np.ndarray:
        if self.cfg.positional_mode == "sinusoidal":
            return sinusoidal_codes(self.n_joints + self.n_coarse)
        return np.concatenate([self.joint_positions, self.vertex_positions], axis=0)

    # -- forward ----------------------------------------------------------

    def features(self, feature=None, images=None) -> ad.Tensor:
        """The ``(B, H)`` feature tensor from precomputed vectors or raster images."""
        if self.cfg.feature_extractor == "tiny_cnn":
            if images is None:
                raise ShapeError("this model extracts features from images; none given")
            return self.extractor.forward(images)
        if feature is None:
            raise ShapeError("precomputed feature vectors required")
        return ad.Tensor(np.asarray(feature), dtype=self.dtype)

    def build_queries(self, X, rng=None, mvm_max_fraction: float = 0.0, mask=None) -> QuerySet:
        return build_queries(X, self.positions(), self.params["mask_token"], self.n_joints,
                             rng, mvm_max_fraction, mask)

    def encoder_forward(self, qs: QuerySet, retain_attention: bool | str = False):
        """Run all blocks. Returns (last-block hidden states, per-token xyz, attention list)."""
        cfg, P = self.cfg, self.params
        x = qs.queries
        attn = []
        n_layers = cfg.total_layers
        layer_idx = 0
        w_in = cfg.query_dim
        for i, blk in enumerate(cfg.blocks):
            if blk.hidden_dim != w_in:
                name = "enc.in" if i == 0 else f"enc.proj{i}"
                x = ad.linear(x, P[f"{name}.w"], P[f"{name}.b"])
            d = blk.hidden_dim
            for j in range(blk.layers):
                p = f"enc.b{i}.l{j}"
                h = ad.layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"], cfg.ln_eps)
                qkv = ad.linear(h, P[f"{p}.qkv.w"], P[f"{p}.qkv.b"])
                ctx, probs = ad.multi_head_attention(ad.slice_(qkv, 0, d), ad.slice_(qkv, d, 2 * d),
                                                     ad.slice_(qkv, 2 * d, 3 * d), blk.heads)
                x = ad.add(x, ad.linear(ctx, P[f"{p}.out.w"], P[f"{p}.out.b"]))
                h = ad.layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"], cfg.ln_eps)
                f = ad.linear(ad.gelu(ad.linear(h, P[f"{p}.ffn1.w"], P[f"{p}.ffn1.b"])),
                              P[f"{p}.ffn2.w"], P[f"{p}.ffn2.b"])
                x = ad.add(x, f)
                layer_idx += 1
                keep = retain_attention is True or (retain_attention == "last" and layer_idx == n_layers)
                attn.append(probs if keep else None)
            x = ad.layer_norm(x, P[f"enc.b{i}.lnf.g"], P[f"enc.b{i}.lnf.b"], cfg.ln_eps)
            w_in = d
        tokens = ad.linear(x, P["head.w"], P["head.b"])
        return x, tokens, attn

    def heads_forward(self, hidden: ad.Tensor, tokens: ad.Tensor, attention=None) -> ModelOutput:
        P = self.params
        K, M, Mf = self.n_joints, self.n_coarse, self.n_full
        B = tokens.shape[0]
        joints = ad.slice_(tokens, 0, K, axis=1)
        coarse = ad.slice_(tokens, K, K + M, axis=1)
        flat = ad.reshape(coarse, (B, 3 * M))
        lin = ad.linear(flat, P["up.lin.w"], P["up.lin.b"])
        res = ad.linear(ad.gelu(ad.linear(flat, P["up.fc1.w"], P["up.fc1.b"])), P["up.fc2.w"], P["up.fc2.b"])
        full = ad.reshape(ad.add(lin, res), (B, Mf, 3))
        cam_raw = ad.linear(ad.mean_pool(hidden), P["cam.w"], P["cam.b"])
        cam = ad.concat([ad.softplus(ad.slice_(cam_raw, 0, 1)), ad.slice_(cam_raw, 1, 3)], axis=-1)
        return ModelOutput(joints, coarse, full, cam, tokens, hidden, attention or [])

    def forward(self, X, rng=None, mvm_max_fraction: float = 0.0, mask=None,
                retain_attention: bool | str = False) -> ModelOutput:
        qs = self.build_queries(X, rng, mvm_max_fraction, mask)
        hidden, tokens, attn = self.encoder_forward(qs, retain_attention)
        out = self.heads_forward(hidden, tokens, attn)
        out.masked = qs.masked
        return out

    __call__ = forward


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"MTRO"
CHECKPOINT_VERSION = 1


def _u32(x) -> bytes:
    return np.uint32(x).astype("<u4").tobytes()


def save_checkpoint(path: str | os.PathLike, model: Metro, extra: dict | None = None) -> None:
    cfg_blob = json.dumps({"encoder": model.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    entries = [("buffer.joint_positions", model.joint_positions),
               ("buffer.vertex_positions", model.vertex_positions),
               ("buffer.regressor", model.regressor)]
    entries += [(k, v.data) for k, v in model.params.items()]
    chunks = [CHECKPOINT_MAGIC, _u32(CHECKPOINT_VERSION), model.cfg.digest(), _u32(len(cfg_blob)), cfg_blob,
              _u32(len(entries))]
    for name, arr in entries:
        nb = name.encode()
        arr = np.asarray(arr)
        chunks += [np.uint16(len(nb)).astype("<u2").tobytes(), nb, np.uint8(arr.ndim).tobytes()]
        chunks += [_u32(s) for s in arr.shape]
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> tuple[Metro, dict]:
    """Rebuild a float32 model from ``path``; returns (model, extra metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        out = raw[pos:pos + n]
        pos += n
        return out

    version = int(np.frombuffer(take(4), "<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = take(32)
    n_cfg = int(np.frombuffer(take(4), "<u4")[0])
    meta = json.loads(take(n_cfg).decode())
    cfg = EncoderConfig.from_dict(meta["encoder"])
    if cfg.digest() != digest:
        raise FormatError(f"{path}: config digest mismatch")
    n_entries = int(np.frombuffer(take(4), "<u4")[0])
    arrays = {}
    for _ in range(n_entries):
        ln = int(np.frombuffer(take(2), "<u2")[0])
        name = take(ln).decode()
        ndim = take(1)[0]
        shape = tuple(int(s) for s in np.frombuffer(take(4 * ndim), "<u4")) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(4 * count), "<f4").reshape(shape).copy()
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after last entry")
    model = Metro(cfg, arrays.pop("buffer.joint_positions"), arrays.pop("buffer.vertex_positions"),
                  arrays.pop("buffer.regressor"), dtype=np.float32, init=False)
    for name, arr in arrays.items():
        model.params[name] = ad.Tensor(arr, requires_grad=True, name=name, dtype=np.float32)
    model._attach_extractor()
    return model, meta.get("extra", {})
