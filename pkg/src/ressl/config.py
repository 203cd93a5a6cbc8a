"""Experiment configuration: defaults, validation, (de)serialization and hashing."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugmentationPolicy, ColorJitter, contrastive_policy
from .data import DatasetSpec
from .exceptions import ConfigError
from .models import BackboneSpec, ProjectionHeadSpec
from .relational import TemperaturePair

CONFIG_VERSION = 1
OBJECTIVES = ("ressl", "info_nce", "byol_style")
MEDIUM = ("stl10", "tiny_imagenet")
# execution-only settings, excluded from the config hash
RUNTIME_KEYS = ("device", "num_workers", "knn_every", "keep_checkpoints")

# teacher pipeline components for the augmentation grid
TEACHER_COMPONENTS = ("crop", "flip", "jitter", "gray", "blur")
TEACHER_PRESETS = {"weak": "crop+flip", "contrastive": "crop+flip+jitter+gray+blur", "none": ""}


def teacher_policy_from_name(name: str, output_side: int) -> AugmentationPolicy:
    """Build a teacher policy from ``weak``, ``contrastive``, ``none`` or ``+``-joined components."""
    spec = TEACHER_PRESETS.get(name, name)
    parts = {p for p in spec.split("+") if p}
    unknown = parts - set(TEACHER_COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown teacher augmentation component(s) {sorted(unknown)}")
    kw = dict(output_side=output_side, random_crop="crop" in parts, flip_prob=0.5 if "flip" in parts else 0.0)
    if parts <= {"crop", "flip"}:
        return AugmentationPolicy(kind="weak", **kw)
    return AugmentationPolicy(
        kind="contrastive",
        color_jitter=ColorJitter(0.5, 0.8) if "jitter" in parts else None,
        grayscale_prob=0.2 if "gray" in parts else None,
        blur_prob=0.5 if "blur" in parts else None,
        **kw,
    )


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec | None = None
    batch_size: int = 256
    epochs: int = 200
    tau_t: float = 0.04
    tau_s: float = 0.1
    queue_capacity: int | None = None
    ema_momentum: float | None = None
    base_lr: float | None = None
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    bn_groups: int = 8
    objective: str = "ressl"
    info_nce_tau: float = 0.2
    predictor_hidden: int = 512
    multicrop_sides: list | None = None
    image_side: int | None = None
    teacher_augmentation: str = "weak"
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head: ProjectionHeadSpec = field(default_factory=ProjectionHeadSpec)
    normalization: dict | None = None
    knn_every: int = 0
    knn_k: int = 200
    knn_temperature: float = 0.1
    collapse_low: float = 0.01
    collapse_high: float = 0.99
    keep_checkpoints: int = 2
    device: str = "cpu"
    num_workers: int = 0
    seed: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        if isinstance(self.head, dict):
            self.head = ProjectionHeadSpec(**self.head)
        medium = self.dataset is not None and self.dataset.name in MEDIUM
        if self.queue_capacity is None:
            self.queue_capacity = 16384 if medium else 4096
        if self.ema_momentum is None:
            self.ema_momentum = 0.996 if medium else 0.99
        if self.base_lr is None:
            self.base_lr = 0.06 * self.batch_size / 256
        if self.image_side is None:
            self.image_side = 64 if medium else 32
        if self.multicrop_sides is None:
            self.multicrop_sides = [self.image_side]
        self.multicrop_sides = [int(s) for s in self.multicrop_sides]
        self.validate()

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size and epochs must be positive")
        if self.num_workers < 0 or self.keep_checkpoints < 1:
            raise ConfigError("num_workers must be >= 0 and keep_checkpoints >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError(f"ema_momentum must lie in [0, 1], got {self.ema_momentum}")
        if self.queue_capacity < self.batch_size:
            raise ConfigError(f"queue_capacity {self.queue_capacity} is smaller than batch_size {self.batch_size}")
        if self.bn_groups < 1 or self.batch_size % self.bn_groups:
            raise ConfigError(f"batch_size {self.batch_size} is not divisible by bn_groups {self.bn_groups}")
        if not self.multicrop_sides or self.multicrop_sides[0] != self.image_side:
            raise ConfigError("multicrop_sides must start with the canonical image_side")
        teacher_policy_from_name(self.teacher_augmentation, self.image_side)
        TemperaturePair(self.tau_t, self.tau_s)

    @property
    def temps(self) -> TemperaturePair:
        return TemperaturePair(self.tau_t, self.tau_s)

    def policies(self) -> tuple[AugmentationPolicy, AugmentationPolicy]:
        teacher = teacher_policy_from_name(self.teacher_augmentation, self.image_side)
        kind = "multicrop_student" if len(self.multicrop_sides) > 1 else "contrastive"
        student = contrastive_policy(self.image_side, kind=kind)
        if self.normalization is not None:
            mean, std = self.normalization["mean"], self.normalization["std"]
            teacher = teacher.with_normalization(mean, std)
            student = student.with_normalization(mean, std)
        return teacher, student

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "dataset":
                value = None if value is None else {
                    "name": value.name, "root_path": str(value.root_path), "split": value.split}
            elif f.name in ("backbone", "head"):
                value = asdict(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def override(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        raw = self.to_dict()
        raw.update(changes)
        return ExperimentConfig.from_dict(raw)

    def hash(self) -> str:
        raw = self.to_dict()
        for key in RUNTIME_KEYS:
            raw.pop(key)
        if raw["dataset"] is not None:
            raw["dataset"].pop("root_path")
        blob = json.dumps(raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return ExperimentConfig.from_dict(raw)


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    return num_samples // batch_size


def lr_at(step: int, config: ExperimentConfig, steps_in_epoch: int) -> float:
    """Linear warm-up from 0 to the peak, then half-cosine decay to 0, per step."""
    peak = config.base_lr
    warmup = config.warmup_epochs * steps_in_epoch
    total = config.epochs * steps_in_epoch
    if step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    progress = min(1.0, (step - warmup) / (total - warmup))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))

