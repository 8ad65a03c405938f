"""Configuration dataclasses and the flat ``key = value`` config file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the field names of :class:`WorldConfig`, :class:`ModelConfig` and
:class:`TrainConfig`, plus ``sample_steps``, ``guidance`` and ``sample_seed``
for :class:`SampleConfig`. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class WorldConfig:
    canvas: tuple[int, int] = (32, 32)  # (H, W) pixels
    patch: int = 2
    joint_count: int = 5
    pose_channels: int = 3
    palette_size: int = 4
    num_actions: int = 8
    desc_len: int = 6
    max_people: int = 3
    num_people: int = 1
    allow_duplicates: bool = False
    allow_overlap: bool = False
    margin: int = 2  # box dilation in pixels (one patch at the default patch size)

    @property
    def grid(self) -> tuple[int, int]:
        return (self.canvas[0] // self.patch, self.canvas[1] // self.patch)

    def with_people(self, n: int) -> "WorldConfig":
        return dataclasses.replace(self, num_people=n)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 2
    head_dim: int = 32
    mlp_ratio: int = 4
    lora_rank: int = 8
    rope_split: tuple[int, int, int] = (8, 12, 12)
    rope_base: float = 10000.0
    vocab_size: int = 64


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"  # or "finetune"
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 1000
    lambda_pose: float = 1.0
    lambda_img: float = 1.0
    p_drop: float = 0.1
    seed: int = 0
    ckpt_every: int = 0  # 0 disables periodic checkpoints
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over ``steps``
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    guidance: float = 4.0
    seed: int = 0
    reuse_noise: bool = False
    context_snap: float = 0.1
    skip_intermediate_image: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.guidance < 0:
            raise ConfigError("guidance must be >= 0")


_SAMPLE_KEYS = {
    "sample_steps": "steps",
    "guidance": "guidance",
    "sample_seed": "seed",
    "reuse_noise": "reuse_noise",
    "context_snap": "context_snap",
    "skip_intermediate_image": "skip_intermediate_image",
}


def _coerce(raw: str, default: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.strip("()[] ").replace(",", " ").split() if p]
            kind = type(default[0])
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _known_keys() -> dict[str, tuple[type, str, Any]]:
    out: dict[str, tuple[type, str, Any]] = {}
    for cls in (WorldConfig, ModelConfig, TrainConfig):
        inst = cls()
        for f in fields(cls):
            out[f.name] = (cls, f.name, getattr(inst, f.name))
    sample = SampleConfig()
    for key, name in _SAMPLE_KEYS.items():
        out[key] = (SampleConfig, name, getattr(sample, name))
    return out


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key = value`` text into typed overrides. Unknown keys raise."""
    known = _known_keys()
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, known[key][2], key)
    return values


def load_config(path: str | Path) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    @classmethod
    def from_values(cls, values: dict[str, Any]) -> "RunConfig":
        known = _known_keys()
        buckets: dict[type, dict[str, Any]] = {
            WorldConfig: {}, ModelConfig: {}, TrainConfig: {}, SampleConfig: {}}
        for key, val in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r}")
            owner, name, _ = known[key]
            buckets[owner][name] = val
        return cls(
            world=WorldConfig(**buckets[WorldConfig]),
            model=ModelConfig(**buckets[ModelConfig]),
            train=TrainConfig(**buckets[TrainConfig]),
            sample=SampleConfig(**buckets[SampleConfig]),
        )

    def echo(self) -> str:
        """Resolved config as flat ``key = value`` lines."""
        lines = []
        for part in (self.world, self.model, self.train):
            for f in fields(part):
                val = getattr(part, f.name)
                if isinstance(val, tuple):
                    val = ",".join(str(v) for v in val)
                lines.append(f"{f.name} = {val}")
        for key, name in _SAMPLE_KEYS.items():
            lines.append(f"{key} = {getattr(self.sample, name)}")
        return "\n".join(lines) + "\n"
