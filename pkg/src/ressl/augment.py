"""Weak (teacher) and contrastive (student) view generators.

Every random choice for one view is drawn up front into a :class:`ViewDraw`
from an explicit ``numpy.random.Generator``; :func:`apply_view` is then a pure
function of ``(image, draw, policy)``. Weak and contrastive draws consume the
generator in the same order for crop and flip, so with the optional stages
skipped both pipelines produce the same view.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from .exceptions import ConfigError

KINDS = ("weak", "contrastive", "multicrop_student")


@dataclass(frozen=True)
class ColorJitter:
    """Colour distortion of a given strength, applied with probability ``prob``.

    Strength ``s`` maps to brightness/contrast/saturation ``0.8 s`` and hue
    ``0.2 s`` (0.4/0.4/0.4/0.1 at the default 0.5).
    """

    strength: float = 0.5
    prob: float = 0.8

    @property
    def brightness(self) -> float:
        return 0.8 * self.strength

    @property
    def contrast(self) -> float:
        return 0.8 * self.strength

    @property
    def saturation(self) -> float:
        return 0.8 * self.strength

    @property
    def hue(self) -> float:
        return 0.2 * self.strength


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str
    output_side: int = 32
    crop_ratio_low: float = 0.2
    crop_ratio_high: float = 1.0
    random_crop: bool = True
    flip_prob: float = 0.5
    color_jitter: ColorJitter | None = None
    grayscale_prob: float | None = None
    blur_prob: float | None = None
    mean: tuple | None = None
    std: tuple | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if not 0 < self.crop_ratio_low <= self.crop_ratio_high <= 1:
            raise ConfigError(
                f"need 0 < crop_ratio_low <= crop_ratio_high <= 1, got "
                f"({self.crop_ratio_low}, {self.crop_ratio_high})"
            )
        if self.kind == "weak" and (
            self.color_jitter is not None or self.grayscale_prob is not None or self.blur_prob is not None
        ):
            raise ConfigError("a weak policy cannot have colour jitter, grayscale or blur")
        if isinstance(self.color_jitter, dict):
            object.__setattr__(self, "color_jitter", ColorJitter(**self.color_jitter))
        for name in ("mean", "std"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(v) for v in value))

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("mean", "std"):
            if out[name] is not None:
                out[name] = list(out[name])
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "AugmentationPolicy":
        return cls(**raw)

    def with_side(self, side: int) -> "AugmentationPolicy":
        return replace(self, output_side=side)

    def with_normalization(self, mean, std) -> "AugmentationPolicy":
        return replace(self, mean=tuple(mean), std=tuple(std))


def weak_policy(output_side: int = 32, **kw) -> AugmentationPolicy:
    """Random resized crop with area ratio in (0.2, 1) plus horizontal flip."""
    return AugmentationPolicy(kind="weak", output_side=output_side, **kw)


def contrastive_policy(output_side: int = 32, kind: str = "contrastive", **kw) -> AugmentationPolicy:
    kw.setdefault("color_jitter", ColorJitter(0.5, 0.8))
    kw.setdefault("grayscale_prob", 0.2)
    kw.setdefault("blur_prob", 0.5)
    return AugmentationPolicy(kind=kind, output_side=output_side, **kw)


@dataclass
class ViewDraw:
    """All random choices for a single view."""

    top: int
    left: int
    height: int
    width: int
    scale: float = 1.0
    flip: bool = False
    jitter_order: tuple | None = None
    jitter_factors: tuple | None = None
    grayscale: bool = False
    blur_sigma: float | None = None


def sample_crop(height: int, width: int, low: float, high: float, rng: np.random.Generator):
    """Random-resized-crop box: area fraction ~ U[low, high], log aspect ~ U[log 3/4, log 4/3].

    Returns ``(top, left, h, w, scale)``; after ten rejected attempts falls
    back to the largest centred box with clamped aspect ratio.
    """
    area = height * width
    log_ratio = (math.log(3 / 4), math.log(4 / 3))
    for _ in range(10):
        scale = float(rng.uniform(low, high))
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(area * scale * aspect)))
        h = int(round(math.sqrt(area * scale / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w, scale
    in_ratio = width / height
    if in_ratio < 3 / 4:
        w, h = width, int(round(width / (3 / 4)))
    elif in_ratio > 4 / 3:
        h, w = height, int(round(height * (4 / 3)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w, (h * w) / area


def draw_view(height: int, width: int, policy: AugmentationPolicy, rng: np.random.Generator) -> ViewDraw:
    if policy.random_crop:
        top, left, h, w, scale = sample_crop(height, width, policy.crop_ratio_low, policy.crop_ratio_high, rng)
    else:
        top, left, h, w, scale = 0, 0, height, width, 1.0
    draw = ViewDraw(top, left, h, w, scale)
    draw.flip = bool(rng.random() < policy.flip_prob)
    cj = policy.color_jitter
    if cj is not None and rng.random() < cj.prob:
        draw.jitter_order = tuple(int(i) for i in rng.permutation(4))
        draw.jitter_factors = (
            float(rng.uniform(max(0.0, 1 - cj.brightness), 1 + cj.brightness)),
            float(rng.uniform(max(0.0, 1 - cj.contrast), 1 + cj.contrast)),
            float(rng.uniform(max(0.0, 1 - cj.saturation), 1 + cj.saturation)),
            float(rng.uniform(-cj.hue, cj.hue)),
        )
    if policy.grayscale_prob is not None and rng.random() < policy.grayscale_prob:
        draw.grayscale = True
    if policy.blur_prob is not None and rng.random() < policy.blur_prob:
        draw.blur_sigma = float(rng.uniform(0.1, 2.0))
    return draw


def blur_kernel_size(side: int) -> int:
    """10% of the image side, rounded up to the next odd integer."""
    k = math.ceil(0.1 * side)
    return k if k % 2 == 1 else k + 1


def to_tensor(image) -> torch.Tensor:
    """HWC uint8 array -> CHW float32 tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        return image
    return torch.tensor(np.asarray(image)).permute(2, 0, 1).float().div_(255.0)


def standardize(img: torch.Tensor, policy: AugmentationPolicy) -> torch.Tensor:
    if policy.mean is None:
        return img
    mean = torch.tensor(policy.mean, dtype=img.dtype).view(3, 1, 1)
    std = torch.tensor(policy.std, dtype=img.dtype).view(3, 1, 1)
    return (img - mean) / std


def apply_view(image, draw: ViewDraw, policy: AugmentationPolicy) -> torch.Tensor:
    img = to_tensor(image)
    side = policy.output_side
    img = TF.resized_crop(img, draw.top, draw.left, draw.height, draw.width, [side, side], antialias=True)
    if draw.flip:
        img = TF.horizontal_flip(img)
    if draw.jitter_factors is not None:
        b, c, s, h = draw.jitter_factors
        for op in draw.jitter_order:
            if op == 0:
                img = TF.adjust_brightness(img, b)
            elif op == 1:
                img = TF.adjust_contrast(img, c)
            elif op == 2:
                img = TF.adjust_saturation(img, s)
            else:
                img = TF.adjust_hue(img, h)
        img = img.clamp_(0.0, 1.0)
    if draw.grayscale:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    if draw.blur_sigma is not None:
        k = blur_kernel_size(side)
        img = TF.gaussian_blur(img, [k, k], [draw.blur_sigma, draw.blur_sigma])
    return standardize(img, policy)


def _augment(image, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    h, w = np.shape(image)[:2]
    return apply_view(image, draw_view(h, w, policy, rng), policy)


def weak_augment(image, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    if policy.kind != "weak":
        raise ConfigError(f"weak_augment needs a weak policy, got {policy.kind!r}")
    return _augment(image, policy, rng)


def contrastive_augment(image, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    if policy.kind not in ("contrastive", "multicrop_student"):
        raise ConfigError(f"contrastive_augment needs a contrastive policy, got {policy.kind!r}")
    return _augment(image, policy, rng)


def augment(image, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Dispatch on ``policy.kind``; used where the teacher policy is configurable."""
    return _augment(image, policy, rng)


def eval_view(image, side: int, mean=None, std=None) -> torch.Tensor:
    """Deterministic test-time view: resize shorter side to ``side`` then centre crop."""
    img = to_tensor(image)
    if img.shape[-1] != side or img.shape[-2] != side:
        img = TF.resize(img, [side], antialias=True)
        img = TF.center_crop(img, [side, side])
    if mean is None:
        return img
    return (img - torch.tensor(mean).view(3, 1, 1)) / torch.tensor(std).view(3, 1, 1)


@dataclass
class ViewPair:
    teacher_view: torch.Tensor
    student_views: list = field(default_factory=list)
    source_id: int = -1


def make_view_pair(image, weak: AugmentationPolicy, student: AugmentationPolicy, crop_sides,
                   rng: np.random.Generator, source_id: int = -1) -> ViewPair:
    """One teacher view at the canonical side and one student view per ``crop_sides`` entry.

    The teacher and student use independent child streams of ``rng``.
    """
    crop_sides = list(crop_sides)
    if not crop_sides:
        raise ConfigError("crop_sides must be nonempty")
    teacher_rng, student_rng = rng.spawn(2)
    teacher = augment(image, weak, teacher_rng)
    views = [augment(image, student.with_side(side), student_rng) for side in crop_sides]
    return ViewPair(teacher, views, source_id)


def sample_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, int(sample_id)]))


def make_batch_views(images, ids, weak: AugmentationPolicy, student: AugmentationPolicy, crop_sides,
                     seed: int, epoch: int):
    """Stack per-sample view pairs into ``(teacher (B,3,S,S), [student (B,3,s,s) per side])``.

    Each sample's randomness depends only on ``(seed, epoch, id)``.
    """
    pairs = [
        make_view_pair(img, weak, student, crop_sides, sample_rng(seed, epoch, i), int(i))
        for img, i in zip(images, ids)
    ]
    teacher = torch.stack([p.teacher_view for p in pairs])
    students = [torch.stack([p.student_views[j] for p in pairs]) for j in range(len(crop_sides))]
    return teacher, students
