"""Multi-task self-supervised pretraining: losses, AdamW, schedule, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import PretrainConfig
from .errors import CheckpointError, DataError, NumericError
from .imageops import (TASKS, DegradationSpec, Image, augment, degrade, document_textures, images_to_batch,
                       patchify, read_image)
from .nn import Module
from .vit import Encoder, ModelConfig, ReconDecoder, init_weights

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TDIA"
CHECKPOINT_VERSION = 1


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


class Autoencoder(Module):
    def __init__(self, encoder: Encoder, decoder: ReconDecoder):
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Autoencoder":
        return cls(*init_weights(config, seed))

    def reconstruct(self, patches, task: str) -> T.Tensor:
        return self.decoder(self.encoder(patches, task), task)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int, schedule: str = "cosine") -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "constant":
        return base_lr
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
                 beta1: float, beta2: float, eps: float, weight_decay: float, decay: bool, decoupled: bool = True):
    """One in-place Adam step on ``param`` with moments ``m``/``v`` at step ``t`` (1-based).

    ``decoupled`` applies ``p -= lr * wd * p`` before the Adam step (AdamW);
    otherwise weight decay is added to the gradient as an L2 term (Adam).
    Either form only touches tensors with ``decay`` set.
    """
    if decay and weight_decay:
        if decoupled:
            param *= 1.0 - lr * weight_decay
        else:
            grad = grad + weight_decay * param
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1.5e-4, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05, decoupled: bool = True):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            adamw_update(p.data, p.grad, self.m[name], self.v[name], self.t, lr, self.beta1, self.beta2,
                         self.eps, self.weight_decay, getattr(p, "decay", False), self.decoupled)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> dict:
        out = {}
        for k in self.params:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict, t: int):
        for k in self.params:
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"optim.{slot}.{k}"
                if key not in tensors:
                    raise CheckpointError(f"missing optimizer tensor {key}", field=key)
                if tensors[key].shape != store[k].shape:
                    raise CheckpointError(f"shape mismatch for {key}: {tensors[key].shape} vs {store[k].shape}",
                                          field=key)
                store[k][...] = tensors[key]
        self.t = t


def make_optimizer(model: Module, cfg, decoupled: bool = True, params: dict | None = None) -> AdamW:
    return AdamW(model.named_parameters() if params is None else params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                 eps=cfg.eps, weight_decay=cfg.weight_decay, decoupled=decoupled)


# ---------------------------------------------------------------------------
# pretext losses
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _textures(h, w, c):
    return tuple(document_textures(h, w, c))


def degrade_batch(images: Sequence[Image], task: str, cfg: PretrainConfig, patch_size: int, step_seed: int):
    """Degrade every image with a seed derived from ``(step_seed, index, task)``.

    Noise backgrounds are the other images of the batch plus the bundled
    document textures.
    """
    out = []
    tid = TASKS.index(task)
    for i, img in enumerate(images):
        spec = DegradationSpec(task, mask_ratio=cfg.mask_ratio,
                               blur_kernel_range=(cfg.blur_kernel_min, cfg.blur_kernel_max),
                               noise_alpha_range=(cfg.noise_alpha_min, cfg.noise_alpha_max),
                               rng_seed=derive_seed(step_seed, i, tid))
        pool = None
        if task == "noise":
            pool = [im for j, im in enumerate(images) if j != i] + list(_textures(img.height, img.width, img.channels))
        out.append(degrade(img, spec, patch_size, pool)[0])
    return out


def step_tasks(cfg: PretrainConfig, step: int):
    if cfg.task_schedule == "round_robin":
        return (TASKS[step % len(TASKS)],)
    return TASKS


def pretrain_losses(model: Autoencoder, images: Sequence[Image], cfg: PretrainConfig, patch_size: int,
                    step_seed: int, step: int = 0):
    """Build ``L_pt = sum(lambda_T * MSE(D(E(phi(I, T))), I))`` for the active tasks.

    Returns ``(total, per_task)``; tasks with zero weight are evaluated
    without recording a graph so they are reported but add no gradient.
    """
    if not images:
        raise DataError("empty pretraining batch")
    dtype = model.encoder.pos.dtype
    target = patchify(images_to_batch(images, dtype), patch_size)
    per_task = {}
    total = None
    for task in step_tasks(cfg, step):
        lam = cfg.lambdas[TASKS.index(task)]
        degraded = patchify(images_to_batch(degrade_batch(images, task, cfg, patch_size, step_seed), dtype),
                            patch_size)
        if lam == 0:
            with T.no_grad():
                per_task[task] = T.mse_loss(model.reconstruct(degraded, task), target)
            continue
        loss = T.mse_loss(model.reconstruct(degraded, task), target)
        per_task[task] = loss
        term = loss if lam == 1 else loss * lam
        total = term if total is None else total + term
    if total is None:
        total = T.Tensor(np.zeros((), dtype=dtype))
    return total, per_task


def pretrain_step(model: Autoencoder, optimizer: AdamW, images: Sequence[Image], cfg: PretrainConfig,
                  patch_size: int, step_seed: int, lr: float, step: int = 0) -> dict:
    """One joint update: degrade, reconstruct, backprop every task, single AdamW step."""
    optimizer.zero_grad()
    total, per_task = pretrain_losses(model, images, cfg, patch_size, step_seed, step)
    values = {f"loss_{k}": float(v.data) for k, v in per_task.items()}
    values["loss_total"] = float(total.data)
    if not all(math.isfinite(x) for x in values.values()):
        raise NumericError(f"non-finite loss at step {step}: {values}")
    if total.requires_grad:
        total.backward()
    T.check_finite(model.named_parameters().items(), where=f"after backward at step {step}")
    optimizer.step(lr)
    T.check_finite(model.named_parameters().items(), where=f"after update at step {step}")
    return values


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    model_config: dict
    train_config: dict
    tensors: dict
    step: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def model_tensors(self, prefix: str = "") -> dict:
        return {k[len(prefix):]: v for k, v in self.tensors.items()
                if k.startswith(prefix) and not k.startswith("optim.")}


def save_checkpoint(path, ckpt: Checkpoint):
    """Write ``TDIA | u32 version | u32 header length | JSON header | raw LE payloads``."""
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"kind": ckpt.kind, "model_config": ckpt.model_config, "train_config": ckpt.train_config,
              "step": ckpt.step, "rng": ckpt.rng, "extra": ckpt.extra, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_checkpoint(raw)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}", field="magic")
    if len(raw) < 12:
        raise CheckpointError("file truncated inside the preamble", field="version")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", field="version")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CheckpointError("file truncated inside the header", field="header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}", field="header") from None
    for key in ("kind", "model_config", "train_config", "step", "tensors"):
        if key not in header:
            raise CheckpointError(f"header is missing {key!r}", field=key)
    base = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        name = entry.get("name", "?")
        try:
            dt = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            start, nbytes = base + entry["offset"], entry["nbytes"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"bad tensor directory entry for {name}: {exc}", field=name) from None
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"tensor {name}: byte count does not match shape", field=name)
        if start + nbytes > len(raw):
            raise CheckpointError(f"file truncated inside tensor {name}", field=name)
        tensors[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                                      offset=start).reshape(shape).astype(dt.newbyteorder("="))
    return Checkpoint(kind=header["kind"], model_config=header["model_config"],
                      train_config=header["train_config"], tensors=tensors, step=int(header["step"]),
                      rng=header.get("rng", {}), extra=header.get("extra", {}), version=version)


def restore_module(module: Module, tensors: dict, prefix: str = ""):
    """Copy tensors into ``module``, checking the name set and every shape."""
    params = module.named_parameters(prefix)
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint has no tensor {name}", field=name)
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}", field=name)
    for name, p in params.items():
        p.data[...] = tensors[name]


def model_checkpoint(kind: str, model: Module, model_config: ModelConfig, train_config, optimizer=None,
                     step: int = 0, rng=None, extra=None) -> Checkpoint:
    tensors = {k: p.data.copy() for k, p in model.named_parameters().items()}
    if optimizer is not None:
        tensors.update({k: v.copy() for k, v in optimizer.state_tensors().items()})
    return Checkpoint(kind=kind, model_config=model_config.to_dict(),
                      train_config=asdict(train_config) if train_config is not None else {},
                      tensors=tensors, step=step, rng=rng or {}, extra=extra or {})


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def read_manifest(path, columns: int = 1):
    """Parse a UTF-8 TSV manifest; paths are resolved relative to its directory."""
    root = Path(path).parent
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < columns:
                raise DataError(f"{path}:{lineno}: expected {columns} tab-separated fields, got {len(parts)}")
            rows.append(parts)
    return root, rows


def load_corpus(manifest) -> list[Image]:
    root, rows = read_manifest(manifest)
    missing = [str(root / r[0]) for r in rows if not (root / r[0]).is_file()]
    if missing:
        raise DataError("missing image files:\n  " + "\n  ".join(missing))
    return [read_image(root / r[0]) for r in rows]


def schedule_lengths(n_samples: int, cfg) -> tuple[int, int, int]:
    """``(steps_per_epoch, warmup_steps, total_steps)`` for a corpus size."""
    spe = max(1, math.ceil(n_samples / cfg.batch_size))
    total = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * spe
    warmup = int(round(cfg.warmup_epochs * spe))
    return spe, min(warmup, total), total


def batch_indices(n: int, batch_size: int, step: int, seed: int, spe: int) -> np.ndarray:
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def train(images: Sequence[Image], model_config: ModelConfig, cfg: PretrainConfig, out_path=None,
          log_stream=None, resume: Checkpoint | None = None, stop_at: int | None = None,
          checkpoint_every: int = 0) -> Checkpoint:
    """Run (or resume) pretraining; returns the final checkpoint.

    ``stop_at`` ends the run early at that global step without changing the
    schedule, which is how resumed runs are compared against uninterrupted
    ones.  ``checkpoint_every`` > 0 writes ``<out>.epochN`` files.
    """
    images = list(images)
    if not images:
        raise DataError("pretraining corpus is empty")
    for im in images:
        if (im.height, im.width, im.channels) != (model_config.image_h, model_config.image_w, model_config.channels):
            raise DataError(f"corpus image of shape {im.shape} does not match model input "
                            f"{model_config.image_h}x{model_config.image_w}x{model_config.channels}")
    model = Autoencoder.create(model_config, cfg.seed)
    opt = make_optimizer(model, cfg, decoupled=True)
    spe, warmup, total = schedule_lengths(len(images), cfg)
    start = 0
    if resume is not None:
        restore_module(model, resume.tensors)
        opt.load_state_tensors(resume.tensors, resume.step)
        start = resume.step
    end = total if stop_at is None else min(stop_at, total)
    for step in range(start, end):
        idx = batch_indices(len(images), cfg.batch_size, step, cfg.seed, spe)
        batch = [images[i] for i in idx]
        if cfg.augment:
            batch = [augment(im, derive_seed(cfg.seed, step, int(i), 99)) for im, i in zip(batch, idx)]
        lr = lr_at(step, cfg.lr, warmup, total, cfg.schedule)
        values = pretrain_step(model, opt, batch, cfg, model_config.patch_size, derive_seed(cfg.seed, step), lr,
                               step)
        record = {"step": step, "lr": lr, "loss_total": values["loss_total"]}
        for t in TASKS:
            record[f"loss_{t}"] = values.get(f"loss_{t}")
        if log_stream is not None:
            log_stream.write(json.dumps(record) + "\n")
            log_stream.flush()
        done = step + 1
        if out_path is not None and checkpoint_every and done % (spe * checkpoint_every) == 0:
            ck = model_checkpoint("pretrain", model, model_config, cfg, opt, done, rng={"seed": cfg.seed})
            save_checkpoint(f"{out_path}.epoch{done // spe}", ck)
    ckpt = model_checkpoint("pretrain", model, model_config, cfg, opt, end, rng={"seed": cfg.seed})
    if out_path is not None:
        save_checkpoint(out_path, ckpt)
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Autoencoder, ModelConfig]:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = Autoencoder.create(cfg, 0)
    restore_module(model, ckpt.tensors)
    return model, cfg
