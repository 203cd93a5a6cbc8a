"""ResNet backbones, projection/predictor heads and the student/teacher pair."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .exceptions import ConfigError, NumericError

ARCHS = ("resnet18_small", "resnet18", "resnet50")
STEMS = ("conv3x3_no_maxpool", "conv7x7_maxpool")


@dataclass(frozen=True)
class BackboneSpec:
    """``base_width`` scales every stage (64 is the standard ResNet)."""

    arch: str = "resnet18_small"
    stem: str | None = None
    base_width: int = 64

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.stem is None:
            object.__setattr__(
                self, "stem", "conv3x3_no_maxpool" if self.arch == "resnet18_small" else "conv7x7_maxpool"
            )
        if self.stem not in STEMS:
            raise ConfigError(f"unknown stem {self.stem!r}")
        if self.arch == "resnet18_small" and self.stem != "conv3x3_no_maxpool":
            raise ConfigError("resnet18_small uses the conv3x3_no_maxpool stem")
        if self.base_width <= 0:
            raise ConfigError("base_width must be positive")

    @property
    def feature_dim(self) -> int:
        expansion = 4 if self.arch == "resnet50" else 1
        return 8 * self.base_width * expansion


@dataclass(frozen=True)
class ProjectionHeadSpec:
    hidden_dim: int = 512
    output_dim: int = 128
    layers: int = 2
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.layers != 2:
            raise ConfigError("the projection head has exactly two layers")
        if self.nonlinearity != "relu":
            raise ConfigError(f"unsupported nonlinearity {self.nonlinearity!r}")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or inplanes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(inplanes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1):
        super().__init__()
        width = planes
        out_planes = planes * self.expansion
        self.conv1 = nn.Conv2d(inplanes, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_planes, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_planes)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or inplanes != out_planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(inplanes, out_planes, 1, stride, bias=False), nn.BatchNorm2d(out_planes)
            )

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + identity)


class ResNet(nn.Module):
    """ResNet trunk ending in global average pooling (no classifier)."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        block, layers = (Bottleneck, [3, 4, 6, 3]) if spec.arch == "resnet50" else (BasicBlock, [2, 2, 2, 2])
        w = spec.base_width
        if spec.stem == "conv3x3_no_maxpool":
            self.stem = nn.Sequential(
                nn.Conv2d(3, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, w, 7, 2, 3, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
        stages = []
        inplanes = w
        for i, n in enumerate(layers):
            planes = w * 2**i
            blocks = []
            for j in range(n):
                blocks.append(block(inplanes, planes, 2 if (j == 0 and i > 0) else 1))
                inplanes = planes * block.expansion
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = inplanes
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        return torch.flatten(self.pool(self.stages(self.stem(x))), 1)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, spec: ProjectionHeadSpec):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, spec.hidden_dim), nn.ReLU(inplace=True), nn.Linear(spec.hidden_dim, spec.output_dim)
        )

    def forward(self, h):
        return self.net(h)


class Predictor(nn.Module):
    """Two-layer MLP mapping an embedding to a same-sized prediction."""

    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, dim))

    def forward(self, z):
        return self.net(z)


class EmbeddingNet(nn.Module):
    """Backbone followed by a projection head: ``z = head(backbone(x))``."""

    def __init__(self, backbone: BackboneSpec, head: ProjectionHeadSpec, predictor_hidden: int | None = None):
        super().__init__()
        self.backbone = ResNet(backbone)
        self.head = ProjectionHead(self.backbone.feature_dim, head)
        self.predictor = None if predictor_hidden is None else Predictor(head.output_dim, predictor_hidden)

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        return self.head(self.backbone(x))


def forward_embed(net: nn.Module, views: torch.Tensor, bn_groups: int = 1) -> torch.Tensor:
    """Unnormalized embeddings; in training mode batch-norm statistics are taken per contiguous group."""
    if bn_groups < 1:
        raise ConfigError("bn_groups must be >= 1")
    if bn_groups == 1 or not net.training:
        return net(views)
    if len(views) % bn_groups:
        raise ConfigError(f"batch size {len(views)} is not divisible by bn_groups={bn_groups}")
    return torch.cat([net(chunk) for chunk in views.chunk(bn_groups)])


def predictor_forward(net: EmbeddingNet, z: torch.Tensor) -> torch.Tensor:
    if getattr(net, "predictor", None) is None:
        raise ConfigError("no predictor head configured")
    return net.predictor(z)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    """Scale each row to unit L2 norm; an all-zero row raises with its index."""
    norms = x.norm(dim=1, keepdim=True)
    zero = (norms.squeeze(1) == 0).nonzero()
    if len(zero):
        raise NumericError(f"cannot normalize zero row {int(zero[0])}")
    return x / norms


@dataclass
class StudentTeacherPair:
    student: EmbeddingNet
    teacher: EmbeddingNet
    momentum: float = 0.99

    def __post_init__(self):
        if not 0 <= self.momentum <= 1:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")
        for p in self.teacher.parameters():
            p.requires_grad_(False)


def init_pair(backbone: BackboneSpec, head: ProjectionHeadSpec, seed: int, momentum: float = 0.99,
              predictor_hidden: int | None = None) -> StudentTeacherPair:
    """Seeded student init; the teacher starts as an exact copy (without the predictor)."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        student = EmbeddingNet(backbone, head, predictor_hidden)
    finally:
        torch.random.set_rng_state(gen_state)
    teacher = copy.deepcopy(student)
    teacher.predictor = None
    return StudentTeacherPair(student, teacher, momentum)


def spec_dict(backbone: BackboneSpec, head: ProjectionHeadSpec) -> dict:
    return {"backbone": asdict(backbone), "head": asdict(head)}
