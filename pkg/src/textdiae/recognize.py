"""Autoregressive text-recognition head, teacher-forced fine-tuning and greedy decoding."""
from __future__ import annotations

import json
import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import FinetuneConfig
from .errors import DataError, DimensionError, NumericError, VocabularyError
from .imageops import Image
from .nn import DecoderBlock, LayerNorm, Linear, Module, Parameter, initialize
from .pretrain import (Checkpoint, lr_at, make_optimizer, model_checkpoint, restore_module,
                       schedule_lengths)
from .tensor import Tensor
from .vit import FINETUNE, Encoder, ModelConfig

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")


class Vocabulary:
    """Character vocabulary with PAD=0, BOS=1, EOS=2 followed by ``chars`` in order."""

    def __init__(self, chars: str):
        if len(set(chars)) != len(chars):
            raise VocabularyError("vocabulary characters must be unique")
        self.chars = str(chars)
        self._index = {c: i + len(SPECIALS) for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.chars)

    def encode(self, text: str) -> list[int]:
        unknown = sorted(set(c for c in text if c not in self._index))
        if unknown:
            raise VocabularyError(f"label {text!r} has characters outside the vocabulary: {''.join(unknown)!r}")
        return [self._index[c] for c in text]

    def decode(self, ids) -> str:
        """Characters for ``ids``, stopping at EOS and skipping PAD/BOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= len(SPECIALS):
                out.append(self.chars[i - len(SPECIALS)])
        return "".join(out)


class RecDecoder(Module):
    """Token embedding + positions, masked-self/cross/MLP blocks, final LN, output linear."""

    def __init__(self, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.vocab = Vocabulary(cfg.charset)
        self.max_len = cfg.max_text_len
        self.token = Parameter((cfg.vocab_size, cfg.rec_dim), dt, init="trunc_normal", decay=True)
        self.pos = Parameter((cfg.max_text_len, cfg.rec_dim), dt, init="trunc_normal")
        self.blocks = [DecoderBlock(cfg.rec_dim, cfg.rec_heads, cfg.enc_dim, cfg.mlp_ratio, dtype=dt)
                       for _ in range(cfg.rec_layers)]
        self.norm = LayerNorm(cfg.rec_dim, dtype=dt)
        self.head = Linear(cfg.rec_dim, cfg.vocab_size, dtype=dt)

    def __call__(self, z: Tensor, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        t = tokens.shape[1]
        if t > self.max_len:
            raise DimensionError(f"token sequence of length {t} exceeds max_len {self.max_len}")
        if z.ndim == 2:
            z = z.reshape(1, *z.shape)
        if z.shape[0] != tokens.shape[0]:
            raise DimensionError(f"batch mismatch: {z.shape[0]} encodings, {tokens.shape[0]} token rows")
        x = T.embedding(self.token, tokens) + self.pos[:t]
        for blk in self.blocks:
            x = blk(x, z)
        return self.head(self.norm(x))


def rec_decoder_forward(z: Tensor, tokens, decoder: RecDecoder) -> Tensor:
    """Logits ``[T, V]`` for one sequence (``[B, T, V]`` when batched)."""
    squeeze = z.ndim == 2
    out = decoder(z, tokens)
    return out.reshape(*out.shape[1:]) if squeeze else out


class Recognizer(Module):
    def __init__(self, encoder: Encoder, decoder: RecDecoder):
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, pretrained: Checkpoint | None = None) -> "Recognizer":
        """Fresh model; with ``pretrained`` the encoder is loaded by name and the decoder stays fresh."""
        enc, dec = Encoder(cfg), RecDecoder(cfg)
        initialize(enc, seed, "encoder.")
        initialize(dec, seed, "decoder.")
        if pretrained is not None:
            load_pretrained_encoder(enc, pretrained)
        return cls(enc, dec)

    def encode(self, images: Sequence[Image]) -> Tensor:
        return self.encoder.encode_images(images, FINETUNE)


def load_pretrained_encoder(encoder: Encoder, ckpt: Checkpoint):
    """Copy ``encoder.*`` tensors from a pretraining checkpoint.

    The fine-tuning projection never sees gradient during pretraining, so it
    starts from the mean of the three pretext projections.
    """
    restore_module(encoder, ckpt.tensors, "encoder.")
    tasks = [t for t in encoder.embed if t != FINETUNE]
    for attr in ("weight", "bias"):
        mean = np.mean([getattr(encoder.embed[t], attr).data for t in tasks], axis=0)
        getattr(encoder.embed[FINETUNE], attr).data[...] = mean


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def teacher_forcing(labels: Sequence[str], vocab: Vocabulary, max_len: int):
    """Padded ``(inputs, targets)``: inputs ``[BOS, c1..cN]``, targets ``[c1..cN, EOS]``."""
    encoded = [vocab.encode(s) for s in labels]
    longest = max(len(e) for e in encoded) + 1
    if longest > max_len:
        raise DataError(f"label of length {longest - 1} does not fit max_text_len {max_len} (needs one slot for EOS)")
    inputs = np.full((len(encoded), longest), PAD, dtype=np.int64)
    targets = np.full((len(encoded), longest), PAD, dtype=np.int64)
    for i, e in enumerate(encoded):
        inputs[i, :len(e) + 1] = [BOS] + e
        targets[i, :len(e) + 1] = e + [EOS]
    return inputs, targets


def rec_loss(model: Recognizer, images: Sequence[Image], labels: Sequence[str], freeze_encoder: bool = False):
    inputs, targets = teacher_forcing(labels, model.decoder.vocab, model.decoder.max_len)
    if freeze_encoder:
        with T.no_grad():
            z = model.encode(images)
    else:
        z = model.encode(images)
    logits = model.decoder(z, inputs)
    return T.cross_entropy_loss(logits, targets, ignore_index=PAD)


def rec_finetune_step(model: Recognizer, optimizer, batch: Sequence[tuple[Image, str]], lr: float | None = None,
                      freeze_encoder: bool = False) -> float:
    """One teacher-forced cross-entropy update; returns the loss before it."""
    images = [b[0] for b in batch]
    labels = [b[1] for b in batch]
    optimizer.zero_grad()
    model.zero_grad()
    loss = rec_loss(model, images, labels, freeze_encoder)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite recognition loss {value}")
    loss.backward()
    optimizer.step(lr)
    return value


def label_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a seeded ``ceil(fraction * n)`` subset."""
    k = max(1, math.ceil(fraction * n)) if n else 0
    return np.sort(np.random.default_rng([seed, 0x1abe1]).permutation(n)[:k])


def finetune_params(model: Module, freeze_encoder: bool) -> dict:
    params = model.named_parameters()
    if freeze_encoder:
        params = {k: p for k, p in params.items() if not k.startswith("encoder.")}
    return params


def train_recognizer(samples: Sequence[tuple[Image, str]], model_config: ModelConfig, cfg: FinetuneConfig,
                     pretrained: Checkpoint | None = None, log_stream=None) -> tuple[Recognizer, Checkpoint]:
    """Fine-tune (or train from scratch) on ``(image, label)`` pairs."""
    samples = list(samples)
    if not samples:
        raise DataError("recognition training set is empty")
    vocab = Vocabulary(model_config.charset)
    for i, (im, label) in enumerate(samples):
        if (im.height, im.width, im.channels) != (model_config.image_h, model_config.image_w, model_config.channels):
            raise DataError(f"sample {i}: image shape {im.shape} does not match the model input")
        vocab.encode(label)
    samples = [samples[i] for i in label_subset(len(samples), cfg.label_fraction, cfg.seed)]
    model = Recognizer.create(model_config, cfg.seed, pretrained)
    opt = make_optimizer(model, cfg, decoupled=cfg.optimizer == "adamw",
                         params=finetune_params(model, cfg.freeze_encoder))
    spe, warmup, total = schedule_lengths(len(samples), cfg)
    for step in range(total):
        epoch, pos = divmod(step, spe)
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        batch = [samples[i] for i in perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        lr = lr_at(step, cfg.lr, warmup, total, cfg.schedule)
        loss = rec_finetune_step(model, opt, batch, lr, cfg.freeze_encoder)
        if log_stream is not None:
            log_stream.write(json.dumps({"step": step, "lr": lr, "loss": loss}) + "\n")
    ckpt = model_checkpoint("rec", model, model_config, cfg, step=total, rng={"seed": cfg.seed})
    return model, ckpt


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def greedy_decode_batch(z: Tensor, decoder: RecDecoder, max_len: int | None = None) -> list[str]:
    """Greedy decoding for a ``[B, N, d]`` batch of encodings.

    PAD and BOS are never emitted; ``argmax`` resolves ties to the lowest id.
    """
    max_len = decoder.max_len if max_len is None else min(max_len, decoder.max_len)
    b = z.shape[0]
    seqs = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    with T.no_grad():
        for _ in range(max_len):
            logits = decoder(z, seqs).data[:, -1].astype(np.float64)
            logits[:, [PAD, BOS]] = -np.inf
            nxt = np.argmax(logits, axis=1)
            nxt[done] = PAD
            done |= nxt == EOS
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            if done.all():
                break
    return [decoder.vocab.decode(row[1:]) for row in seqs]


def greedy_decode(z: Tensor, decoder: RecDecoder, max_len: int | None = None) -> str:
    """Decode a single ``[N, d]`` encoding."""
    if z.ndim == 2:
        z = z.reshape(1, *z.shape)
    return greedy_decode_batch(z, decoder, max_len)[0]


def recognize(model: Recognizer, images: Sequence[Image], batch_size: int = 32) -> list[str]:
    out = []
    for i in range(0, len(images), batch_size):
        with T.no_grad():
            z = model.encode(images[i:i + batch_size])
        out.extend(greedy_decode_batch(z, model.decoder))
    return out


def recognizer_from_checkpoint(ckpt: Checkpoint) -> tuple[Recognizer, ModelConfig]:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = Recognizer.create(cfg, 0)
    restore_module(model, ckpt.tensors)
    return model, cfg
