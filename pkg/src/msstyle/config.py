"""Model and run configuration with the ``default`` and ``tiny`` presets.

``default`` follows the published setup (GST-sized reference encoders,
FastSpeech 2-sized backbone, 4000-step warm-up). ``tiny`` is the CI-scale
preset every test uses.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from msstyle.corpus.types import MelConfig
from msstyle.errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    context_radius: int = 2
    max_global_frames: int | None = 3000
    # extractor (GST reference encoder + token layer per level)
    d_style: int = 128
    ref_channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    n_tokens: int = 10
    token_heads: int = 4
    # predictor
    d_sem: int = 32
    hce_hidden: int = 64
    hce_attn: int = 64
    # acoustic backbone
    d_model: int = 256
    encoder_layers: int = 4
    decoder_layers: int = 4
    attn_heads: int = 2
    ff_hidden: int = 1024
    ff_kernel: int = 9
    variance_filter: int = 256
    variance_kernel: int = 3
    n_bins: int = 256
    dropout: float = 0.2
    variance_dropout: float = 0.5

    def __post_init__(self):
        if self.d_style % self.token_heads:
            raise ContractError("d_style must be divisible by token_heads")
        if self.d_model % self.attn_heads:
            raise ContractError("d_model must be divisible by attn_heads")
        if self.context_radius < 0:
            raise ContractError("context_radius must be >= 0")
        object.__setattr__(self, "ref_channels", tuple(self.ref_channels))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


TINY_MODEL = ModelConfig(
    max_global_frames=1000,
    d_style=16, ref_channels=(8, 16), n_tokens=4, token_heads=1,
    d_sem=32, hce_hidden=8, hce_attn=8,
    d_model=32, encoder_layers=2, decoder_layers=2, attn_heads=2, ff_hidden=64,
    variance_filter=32, dropout=0.0, variance_dropout=0.0,
)


@dataclass(frozen=True)
class TrainingSchedule:
    stage1_steps_per_level: int = 60000
    stage2_steps: int = 20000
    stage3_steps: int = 20000
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_epsilon: float = 1e-9
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    stage3_lr_scale: float = 0.1
    grad_clip: float = 1.0
    seed: int = 1234

    def __post_init__(self):
        for name in ("stage1_steps_per_level", "stage2_steps", "stage3_steps", "batch_size", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not 0 < self.stage3_lr_scale < 1:
            raise ContractError("stage3_lr_scale must lie in (0, 1)")
        if self.lr_scale <= 0:
            raise ContractError("lr_scale must be positive")

    @property
    def stage1_steps(self) -> int:
        return 3 * self.stage1_steps_per_level

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps + self.stage3_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSchedule":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


TINY_SCHEDULE = TrainingSchedule(
    stage1_steps_per_level=200, stage2_steps=200, stage3_steps=200,
    batch_size=8, warmup_steps=50, lr_scale=0.2, seed=1234,
)

PRESETS: dict[str, tuple[ModelConfig, TrainingSchedule]] = {
    "default": (ModelConfig(), TrainingSchedule()),
    "tiny": (TINY_MODEL, TINY_SCHEDULE),
}


@dataclass
class RunConfig:
    """Everything needed to replay a run; written to ``<work_dir>/config.json``."""

    work_dir: str = "work"
    manifest: str | None = None
    preset: str = "tiny"
    seed: int = 1234
    toy_utterances: int | None = None
    chapter_size: int = 8
    eval_chapters: int = 1
    mel: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    schedule: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ContractError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    def mel_config(self) -> MelConfig:
        return MelConfig(**self.mel)

    def model_config(self) -> ModelConfig:
        base = PRESETS[self.preset][0].to_dict()
        base.update(self.model)
        return ModelConfig.from_dict(base)

    def training_schedule(self) -> TrainingSchedule:
        base = PRESETS[self.preset][1].to_dict()
        base["seed"] = self.seed
        base.update(self.schedule)
        return TrainingSchedule.from_dict(base)

    def resolved(self) -> dict:
        return {
            "work_dir": self.work_dir, "manifest": self.manifest, "preset": self.preset,
            "seed": self.seed, "toy_utterances": self.toy_utterances,
            "chapter_size": self.chapter_size, "eval_chapters": self.eval_chapters,
            "mel": self.mel_config().to_dict(),
            "model": self.model_config().to_dict(),
            "schedule": self.training_schedule().to_dict(),
        }

    @classmethod
    def load(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def component_seed(root: int, name: str) -> int:
    """Derive an independent 63-bit seed for a named component."""
    digest = hashlib.blake2b(f"{root}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)
