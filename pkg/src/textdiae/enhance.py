"""Document enhancement head, tiled whole-page inference and binarisation."""
from __future__ import annotations

import json
import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import FinetuneConfig
from .errors import DataError, DimensionError, NumericError
from .imageops import Image, images_to_batch, luma, patchify, unpatchify
from .nn import Module, initialize
from .pretrain import Checkpoint, lr_at, make_optimizer, model_checkpoint, restore_module, schedule_lengths
from .recognize import finetune_params, label_subset, load_pretrained_encoder
from .tensor import Tensor
from .vit import FINETUNE, Encoder, ModelConfig, ReconDecoder


class Enhancer(Module):
    """Encoder plus a reconstruction-style decoder with a single output head.

    Calling it maps a ``[B, H, W, C]`` float batch in [0, 1] to a batch of
    the same shape.
    """

    def __init__(self, encoder: Encoder, decoder: ReconDecoder, cfg: ModelConfig):
        self.encoder = encoder
        self.decoder = decoder
        self.config = cfg

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, pretrained: Checkpoint | None = None) -> "Enhancer":
        enc, dec = Encoder(cfg), ReconDecoder(cfg, tasks=(FINETUNE,))
        initialize(enc, seed, "encoder.")
        initialize(dec, seed, "decoder.")
        if pretrained is not None:
            load_pretrained_encoder(enc, pretrained)
        return cls(enc, dec, cfg)

    @property
    def tile(self) -> tuple[int, int]:
        return self.config.image_h, self.config.image_w

    def forward_patches(self, patches) -> Tensor:
        return self.decoder(self.encoder(patches, FINETUNE), FINETUNE)

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        c = self.config
        p = c.patch_size
        x = patchify(np.asarray(batch, dtype=c.np_dtype), p)
        with T.no_grad():
            out = self.forward_patches(x).data
        return unpatchify(out, p, c.image_h // p, c.image_w // p, c.channels)


def _check_pairs(pairs, cfg: ModelConfig | None = None):
    for i, (deg, clean) in enumerate(pairs):
        if deg.shape != clean.shape:
            raise DataError(f"pair {i}: degraded image {deg.shape} and clean image {clean.shape} differ in size")
        if cfg is not None and deg.shape != (cfg.image_h, cfg.image_w, cfg.channels):
            raise DataError(f"pair {i}: image shape {deg.shape} does not match the model tile "
                            f"{cfg.image_h}x{cfg.image_w}x{cfg.channels}")


def enh_loss(model: Enhancer, pairs: Sequence[tuple[Image, Image]]) -> Tensor:
    _check_pairs(pairs, model.config)
    p = model.config.patch_size
    dt = model.config.np_dtype
    x = patchify(images_to_batch([d for d, _ in pairs], dt), p)
    y = patchify(images_to_batch([c for _, c in pairs], dt), p)
    return T.mse_loss(model.forward_patches(x), y)


def enh_finetune_step(model: Enhancer, optimizer, pairs: Sequence[tuple[Image, Image]],
                      lr: float | None = None) -> float:
    """One MSE update on ``(degraded, clean)`` pairs; returns the loss before it."""
    optimizer.zero_grad()
    model.zero_grad()
    loss = enh_loss(model, pairs)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite enhancement loss {value}")
    loss.backward()
    optimizer.step(lr)
    return value


def train_enhancer(pairs: Sequence[tuple[Image, Image]], model_config: ModelConfig, cfg: FinetuneConfig,
                   pretrained: Checkpoint | None = None, log_stream=None) -> tuple[Enhancer, Checkpoint]:
    pairs = list(pairs)
    if not pairs:
        raise DataError("enhancement training set is empty")
    _check_pairs(pairs, model_config)
    pairs = [pairs[i] for i in label_subset(len(pairs), cfg.label_fraction, cfg.seed)]
    model = Enhancer.create(model_config, cfg.seed, pretrained)
    opt = make_optimizer(model, cfg, decoupled=cfg.optimizer == "adamw",
                         params=finetune_params(model, cfg.freeze_encoder))
    spe, warmup, total = schedule_lengths(len(pairs), cfg)
    for step in range(total):
        epoch, pos = divmod(step, spe)
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        batch = [pairs[i] for i in perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        lr = lr_at(step, cfg.lr, warmup, total, cfg.schedule)
        loss = enh_finetune_step(model, opt, batch, lr)
        if log_stream is not None:
            log_stream.write(json.dumps({"step": step, "lr": lr, "loss": loss}) + "\n")
    return model, model_checkpoint("enh", model, model_config, cfg, step=total, rng={"seed": cfg.seed})


def enhancer_from_checkpoint(ckpt: Checkpoint) -> tuple[Enhancer, ModelConfig]:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = Enhancer.create(cfg, 0)
    restore_module(model, ckpt.tensors)
    return model, cfg


# ---------------------------------------------------------------------------
# whole-page inference
# ---------------------------------------------------------------------------

def _starts(size: int, tile: int, stride: int) -> list[int]:
    n = 1 + max(0, math.ceil((size - tile) / stride))
    return [i * stride for i in range(n)]


def enhance_image(img: Image, model, tile: tuple[int, int] | None = None, overlap: int = 0,
                  batch_size: int = 16) -> Image:
    """Sliding-window inference over an image of any size.

    The image is reflect-padded so the tiles cover it, overlapping
    predictions are averaged uniformly and the padding is cropped.  ``model``
    is any callable on ``[B, th, tw, C]`` float batches; it defaults its
    tile size to ``model.tile`` when available.
    """
    if tile is None:
        tile = getattr(model, "tile", None)
        if tile is None:
            raise DimensionError("tile size must be given for a model without a .tile attribute")
    th, tw = (tile, tile) if isinstance(tile, int) else tile
    if not 0 <= overlap < min(th, tw):
        raise DimensionError(f"overlap {overlap} must be in [0, {min(th, tw)})")
    sy, sx = th - overlap, tw - overlap
    ys, xs = _starts(img.height, th, sy), _starts(img.width, tw, sx)
    ph, pw = ys[-1] + th, xs[-1] + tw
    src = img.to_float(np.float64)
    padded = np.pad(src, ((0, ph - img.height), (0, pw - img.width), (0, 0)), mode="reflect") \
        if (ph, pw) != (img.height, img.width) else src
    acc = np.zeros_like(padded)
    cnt = np.zeros(padded.shape[:2] + (1,))
    coords = [(y, x) for y in ys for x in xs]
    for i in range(0, len(coords), batch_size):
        chunk = coords[i:i + batch_size]
        batch = np.stack([padded[y:y + th, x:x + tw] for y, x in chunk]).astype(np.float32)
        out = np.asarray(model(batch), dtype=np.float64)
        for (y, x), o in zip(chunk, out):
            acc[y:y + th, x:x + tw] += o
            cnt[y:y + th, x:x + tw] += 1
    return Image.from_float((acc / cnt)[:img.height, :img.width])


def binarize(img: Image, threshold: int = 128) -> Image:
    """Ink (0) where luminance <= ``threshold``, background (255) elsewhere."""
    if not 0 <= threshold <= 255:
        raise DataError(f"threshold must be in [0, 255], got {threshold}")
    ink = luma(img.pixels) <= threshold
    return Image(np.where(ink, 0, 255).astype(np.uint8))
