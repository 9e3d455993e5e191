"""Training configurations, named presets and strict TOML loading."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import tomli

from .errors import ConfigError
from .vit import ModelConfig


@dataclass
class PretrainConfig:
    lambda1: float = 1.0   # unmasking
    lambda2: float = 1.0   # deblurring
    lambda3: float = 1.0   # denoising
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 64
    warmup_epochs: float = 3
    epochs: int = 100
    max_steps: int = 0          # >0 caps the run (desk-scale), schedule spans it
    schedule: str = "cosine"
    task_schedule: str = "joint"  # or "round_robin"
    mask_ratio: float = 0.75
    blur_kernel_min: int = 1
    blur_kernel_max: int = 15
    noise_alpha_min: float = 0.2
    noise_alpha_max: float = 0.5
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.task_schedule not in ("joint", "round_robin"):
            raise ConfigError(f"unknown task_schedule {self.task_schedule!r}")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3)


@dataclass
class FinetuneConfig:
    optimizer: str = "adam"     # "adam" (coupled L2) or "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 64
    warmup_epochs: float = 3
    epochs: int = 600
    max_steps: int = 0
    schedule: str = "cosine"
    freeze_encoder: bool = False
    label_fraction: float = 1.0  # seeded subset of labelled samples
    threshold: int = 128         # binarisation threshold for enhancement metrics
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must be in (0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rec: FinetuneConfig = field(default_factory=FinetuneConfig)
    enh: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(
        optimizer="adamw", lr=1.5e-4, beta2=0.99, warmup_epochs=15, epochs=100))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TOY_MODEL = dict(image_h=32, image_w=64, channels=1, patch_size=8,
                  enc_layers=2, enc_heads=2, enc_dim=32,
                  dec_layers=2, dec_heads=2, dec_dim=32,
                  rec_layers=2, rec_heads=2, rec_dim=32, max_text_len=8)


def _preset_dicts():
    return {
        "toy": {
            "model": _TOY_MODEL,
            "pretrain": dict(lr=3e-3, weight_decay=0.0, batch_size=8, warmup_epochs=20, epochs=3000),
            "rec": dict(optimizer="adam", lr=1e-3, weight_decay=0.0, batch_size=8, warmup_epochs=20, epochs=2000),
            "enh": dict(optimizer="adamw", lr=2e-3, weight_decay=0.0, beta2=0.99, batch_size=4,
                        warmup_epochs=20, epochs=2000),
        },
        "paper-htr": {
            "model": dict(dec_dim=512),
            "pretrain": dict(batch_size=64, epochs=100),
            "rec": dict(batch_size=64, epochs=600),
            "enh": {},
        },
        "paper-htr-scratch": {
            "model": dict(dec_dim=512),
            "pretrain": dict(batch_size=64, epochs=100),
            "rec": dict(lr=1.5e-5, warmup_epochs=10, batch_size=64, epochs=600),
            "enh": {},
        },
        "paper-str": {
            "model": dict(dec_dim=512),
            "pretrain": dict(batch_size=192, epochs=2),
            "rec": dict(batch_size=256, epochs=10),
            "enh": {},
        },
        "paper-str-scratch": {
            "model": dict(dec_dim=512),
            "pretrain": dict(batch_size=192, epochs=2),
            "rec": dict(lr=1.5e-5, warmup_epochs=10, batch_size=256, epochs=10),
            "enh": {},
        },
        "paper-enh": {
            "model": dict(image_h=256, image_w=256, dec_dim=768),
            "pretrain": dict(batch_size=64, epochs=50),
            "rec": {},
            "enh": dict(optimizer="adamw", lr=1.5e-4, beta2=0.99, batch_size=64, warmup_epochs=15, epochs=100),
        },
    }


PRESETS = tuple(_preset_dicts())

_SECTIONS = {"model": ModelConfig, "pretrain": PretrainConfig, "rec": FinetuneConfig, "enh": FinetuneConfig}


def _check_keys(section: str, values: dict):
    known = {f.name for f in fields(_SECTIONS[section])}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def build_config(preset: str = "paper-htr", overrides: dict | None = None) -> RunConfig:
    """Start from ``preset`` and apply per-section ``overrides``; unknown keys are errors."""
    presets = _preset_dicts()
    if preset not in presets:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    base = RunConfig()
    layers = [presets[preset], overrides or {}]
    merged = {s: {} for s in _SECTIONS}
    for layer in layers:
        for section, values in layer.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            _check_keys(section, values)
            merged[section].update(values)
    try:
        return RunConfig(
            model=ModelConfig(**{**dataclasses.asdict(base.model), **merged["model"]}),
            pretrain=PretrainConfig(**{**dataclasses.asdict(base.pretrain), **merged["pretrain"]}),
            rec=FinetuneConfig(**{**dataclasses.asdict(base.rec), **merged["rec"]}),
            enh=FinetuneConfig(**{**dataclasses.asdict(base.enh), **merged["enh"]}),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_toml(text: str, default_preset: str = "paper-htr") -> RunConfig:
    """Parse a run config; a top-level ``preset`` key selects the base preset."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    preset = doc.pop("preset", default_preset)
    return build_config(preset, doc)


def load_toml(path, default_preset: str = "paper-htr") -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_toml(fh.read(), default_preset)
