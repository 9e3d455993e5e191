"""Patch embedding, ViT encoder and the patch-reconstruction decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .imageops import TASKS, PatchGrid, images_to_batch, patchify
from .nn import Block, LayerNorm, Linear, Module, Parameter, initialize
from .tensor import Tensor

FINETUNE = "finetune"
ENCODER_EMBEDS = TASKS + (FINETUNE,)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the text-recognition setting: 64x256x3 inputs in 8x8
    patches, a 6-layer/8-head/768-wide encoder and a 512-wide reconstruction
    decoder.  ``rec_*`` size the autoregressive recognition decoder.
    """

    image_h: int = 64
    image_w: int = 256
    channels: int = 3
    patch_size: int = 8
    enc_layers: int = 6
    enc_heads: int = 8
    enc_dim: int = 768
    dec_layers: int = 6
    dec_heads: int = 8
    dec_dim: int = 512
    rec_layers: int = 6
    rec_heads: int = 8
    rec_dim: int = 768
    mlp_ratio: int = 4
    charset: str = "abcdefghijklmnopqrstuvwxyz"
    max_text_len: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        for dim, heads, name in ((self.enc_dim, self.enc_heads, "enc"), (self.dec_dim, self.dec_heads, "dec"),
                                 (self.rec_dim, self.rec_heads, "rec")):
            if heads <= 0 or dim % heads:
                raise ConfigError(f"{name}_dim {dim} is not divisible by {name}_heads {heads}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        for axis, size in (("image_h", self.image_h), ("image_w", self.image_w)):
            if size % self.patch_size:
                raise ConfigError(f"{axis}={size} is not divisible by patch_size={self.patch_size}")
        if len(set(self.charset)) != len(self.charset):
            raise ConfigError("charset contains duplicate characters")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def vocab_size(self) -> int:
        return len(self.charset) + 3

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Encoder(Module):
    """Per-task patch projections, learned positions, pre-LN blocks, final LN."""

    def __init__(self, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.patch_size = cfg.patch_size
        self.embed = {t: Linear(cfg.patch_dim, cfg.enc_dim, dtype=dt) for t in ENCODER_EMBEDS}
        self.pos = Parameter((cfg.num_patches, cfg.enc_dim), dt, init="trunc_normal")
        self.blocks = [Block(cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio, dtype=dt) for _ in range(cfg.enc_layers)]
        self.norm = LayerNorm(cfg.enc_dim, dtype=dt)

    def embed_patches(self, patches, task: str) -> Tensor:
        if task not in self.embed:
            raise ConfigError(f"unknown encoder task {task!r}")
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.pos.dtype))
        if x.shape[-2] != self.pos.shape[0]:
            raise DimensionError(f"{x.shape[-2]} patches but positional table has {self.pos.shape[0]} rows")
        return self.embed[task](x) + self.pos

    def encode(self, z: Tensor) -> Tensor:
        for blk in self.blocks:
            z = blk(z)
        return self.norm(z)

    def __call__(self, patches, task: str) -> Tensor:
        return self.encode(_batched(self.embed_patches(patches, task)))

    def encode_images(self, images, task: str = FINETUNE) -> Tensor:
        return self(patchify(images_to_batch(images, self.pos.dtype), self.patch_size), task)


class ReconDecoder(Module):
    """Maps encoder tokens back to flattened patches, one output head per task."""

    def __init__(self, cfg: ModelConfig, tasks=TASKS):
        dt = cfg.np_dtype
        self.proj = Linear(cfg.enc_dim, cfg.dec_dim, dtype=dt)
        self.pos = Parameter((cfg.num_patches, cfg.dec_dim), dt, init="trunc_normal")
        self.blocks = [Block(cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio, dtype=dt) for _ in range(cfg.dec_layers)]
        self.head = {t: Linear(cfg.dec_dim, cfg.patch_dim, dtype=dt) for t in tasks}

    @property
    def tasks(self):
        return tuple(self.head)

    def __call__(self, z: Tensor, task: str) -> Tensor:
        if task not in self.head:
            raise ConfigError(f"decoder has no head for task {task!r}; available: {self.tasks}")
        x = self.proj(_batched(z)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.head[task](x)


def _batched(x: Tensor) -> Tensor:
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


def init_weights(config: ModelConfig, seed: int = 0, decoder_tasks=TASKS):
    """Fresh ``(Encoder, ReconDecoder)``: Glorot-uniform linears, zero biases,
    unit LN gains and truncated-normal (std 0.02) positional tables."""
    enc = Encoder(config)
    dec = ReconDecoder(config, decoder_tasks)
    initialize(enc, seed, "encoder.")
    initialize(dec, seed, "decoder.")
    return enc, dec


def grid_to_input(grid: PatchGrid, dtype=np.float32) -> np.ndarray:
    return grid.patches.astype(dtype) / np.asarray(255, dtype=dtype)


def patch_embed(encoder: Encoder, grid, task: str) -> Tensor:
    """``z0[i] = E_task(patch_i) + E_pos[i]``; accepts a PatchGrid or a float array."""
    x = grid_to_input(grid, encoder.pos.dtype) if isinstance(grid, PatchGrid) else grid
    return encoder.embed_patches(x, task)


def encoder_forward(encoder: Encoder, z0: Tensor) -> Tensor:
    squeeze = z0.ndim == 2
    out = encoder.encode(_batched(z0))
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite encoder activations")
    return out.reshape(*out.shape[1:]) if squeeze else out


def recon_decoder_forward(decoder: ReconDecoder, z: Tensor, task: str) -> Tensor:
    squeeze = z.ndim == 2
    out = decoder(z, task)
    return out.reshape(*out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def _linear(i, o, bias=True):
    return i * o + (o if bias else 0)


def _block(d, r):
    attn = _linear(d, d) + _linear(d, d, bias=False) + _linear(d, d) + _linear(d, d)
    return 2 * 2 * d + attn + _linear(d, r * d) + _linear(r * d, d)


def _rec_block(d, ctx, r):
    self_attn = _linear(d, d) + _linear(d, d, bias=False) + 2 * _linear(d, d)
    cross = _linear(d, d) + _linear(ctx, d, bias=False) + _linear(ctx, d) + _linear(d, d)
    return 3 * 2 * d + self_attn + cross + _linear(d, r * d) + _linear(r * d, d)


def count_params(config: ModelConfig, part: str = "pretrain") -> int:
    """Learnable parameter count.

    ``part`` is ``encoder``, ``decoder`` (reconstruction, three heads),
    ``recognizer`` (sequence decoder) or ``pretrain`` (encoder + decoder).
    """
    c = config
    n, p = c.num_patches, c.patch_dim
    enc = len(ENCODER_EMBEDS) * _linear(p, c.enc_dim) + n * c.enc_dim \
        + c.enc_layers * _block(c.enc_dim, c.mlp_ratio) + 2 * c.enc_dim
    dec = _linear(c.enc_dim, c.dec_dim) + n * c.dec_dim + c.dec_layers * _block(c.dec_dim, c.mlp_ratio) \
        + len(TASKS) * _linear(c.dec_dim, p)
    rec = c.vocab_size * c.rec_dim + c.max_text_len * c.rec_dim \
        + c.rec_layers * _rec_block(c.rec_dim, c.enc_dim, c.mlp_ratio) + 2 * c.rec_dim \
        + _linear(c.rec_dim, c.vocab_size)
    parts = {"encoder": enc, "decoder": dec, "recognizer": rec, "pretrain": enc + dec}
    if part not in parts:
        raise ConfigError(f"unknown part {part!r}")
    return parts[part]
