"""Convolutional backbones, the feature-fusion ensemble and the student.

Every backbone maps a ``(B, 3, 48, 48)`` batch to its final feature map and
the global-average-pooled feature vector of length ``feature_dim``. A
:class:`Classifier` concatenates pooled features from one or more backbones
and applies an MLP head; a single-backbone classifier is the standalone
model used to train each backbone, the four-backbone classifier is the
ensemble and a one-backbone classifier with a linear head is the student.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .losses import stable_softmax

BACKBONE_KINDS = ("plain_conv", "dense_block", "se_residual", "se_grouped")
N_CLASSES = 7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str
    stage_widths: tuple[int, ...]
    blocks_per_stage: tuple[int, ...]
    se_ratio: int = 16
    cardinality: int = 4
    growth: int = 12

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def validate(self) -> None:
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"kind must be one of {BACKBONE_KINDS}, got {self.kind!r}")
        if not self.stage_widths:
            raise ConfigError("stage_widths must not be empty")
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigError("stage_widths and blocks_per_stage must have equal length")
        if min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigError("stage widths and block counts must be positive")
        if self.kind in ("se_residual", "se_grouped"):
            for w in self.stage_widths:
                if w % self.se_ratio:
                    raise ConfigError(f"se_ratio {self.se_ratio} must divide stage width {w}")
        if self.kind == "se_grouped":
            for w in self.stage_widths:
                if w % self.cardinality:
                    raise ConfigError(f"cardinality {self.cardinality} must divide stage width {w}")
        if self.kind == "dense_block" and self.growth < 1:
            raise ConfigError("growth must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


DEFAULT_BACKBONES = {
    "plain_conv": BackboneConfig("plain_conv", (16, 32, 64), (1, 1, 1)),
    "dense_block": BackboneConfig("dense_block", (16, 32, 48), (2, 2, 2), growth=12),
    "se_residual": BackboneConfig("se_residual", (32, 64), (1, 1), se_ratio=16),
    "se_grouped": BackboneConfig("se_grouped", (32, 96), (1, 1), se_ratio=16, cardinality=4),
}


@dataclass(frozen=True)
class EnsembleConfig:
    backbones: tuple[BackboneConfig, ...] = field(
        default_factory=lambda: tuple(DEFAULT_BACKBONES[k] for k in BACKBONE_KINDS))
    head_hidden: int = 256
    dropout_rate: float = 0.3

    @property
    def head_input_dim(self) -> int:
        return sum(b.feature_dim for b in self.backbones)

    def validate(self) -> None:
        if not self.backbones:
            raise ConfigError("an ensemble needs at least one backbone")
        for b in self.backbones:
            b.validate()
        if self.head_hidden < 0:
            raise ConfigError("head_hidden must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class StudentConfig:
    stage_widths: tuple[int, ...] = (8, 16, 32, 32)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    max_param_ratio: float = 0.10

    def backbone(self) -> BackboneConfig:
        return BackboneConfig("plain_conv", self.stage_widths, self.blocks_per_stage)


# ------------------------------------------------------------ numpy reference

def global_average_pool(feature_map) -> np.ndarray:
    """Mean over the spatial axes of an ``H x W x C`` map."""
    fm = np.asarray(feature_map, dtype=np.float64)
    return fm.mean(axis=(0, 1))


def scale_channels(feature_map, gates) -> np.ndarray:
    return np.asarray(feature_map) * np.asarray(gates)[None, None, :]


def se_gate(feature_map, ratio: int, params: dict) -> np.ndarray:
    """Squeeze-and-excitation on an ``H x W x C`` map.

    ``params`` holds ``w1 (C, C/ratio)``, ``b1``, ``w2 (C/ratio, C)``, ``b2``.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    c = fm.shape[-1]
    if ratio < 1 or c % ratio:
        raise ValueError(f"ratio {ratio} does not divide {c} channels")
    squeezed = global_average_pool(fm)
    hidden = np.maximum(squeezed @ params["w1"] + params["b1"], 0.0)
    gates = 1.0 / (1.0 + np.exp(-(hidden @ params["w2"] + params["b2"])))
    return scale_channels(fm, gates)


# ---------------------------------------------------------------- torch layers

class ConvBNReLU(nn.Sequential):
    def __init__(self, c_in, c_out, kernel=3, stride=1, groups=1, relu=True):
        layers = [
            nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, groups=groups, bias=False),
            nn.BatchNorm2d(c_out),
        ]
        if relu:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class SEGate(nn.Module):
    def __init__(self, channels: int, ratio: int):
        super().__init__()
        if channels % ratio:
            raise ConfigError(f"se_ratio {ratio} must divide {channels} channels")
        self.fc1 = nn.Linear(channels, channels // ratio)
        self.fc2 = nn.Linear(channels // ratio, channels)

    def gates(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gates(x)[:, :, None, None]


class DenseStage(nn.Module):
    def __init__(self, c_in, width, n_layers, growth):
        super().__init__()
        self.layers = nn.ModuleList()
        c = c_in
        for _ in range(n_layers):
            self.layers.append(ConvBNReLU(c, growth))
            c += growth
        self.transition = ConvBNReLU(c, width, kernel=1)

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return self.transition(x)


class SEResidualBlock(nn.Module):
    """Basic residual block (two 3x3 convs) with an SE gate before the add."""

    def __init__(self, c_in, c_out, stride, ratio):
        super().__init__()
        self.conv1 = ConvBNReLU(c_in, c_out, stride=stride)
        self.conv2 = ConvBNReLU(c_out, c_out, relu=False)
        self.se = SEGate(c_out, ratio)
        self.skip = nn.Identity() if stride == 1 and c_in == c_out else \
            ConvBNReLU(c_in, c_out, kernel=1, stride=stride, relu=False)

    def forward(self, x):
        return torch.relu(self.se(self.conv2(self.conv1(x))) + self.skip(x))


class SEGroupedBlock(nn.Module):
    """Aggregated-transform block: 1x1, grouped 3x3, 1x1, SE, skip."""

    def __init__(self, c_in, c_out, stride, ratio, cardinality):
        super().__init__()
        self.reduce = ConvBNReLU(c_in, c_out, kernel=1)
        self.grouped = ConvBNReLU(c_out, c_out, stride=stride, groups=cardinality)
        self.expand = ConvBNReLU(c_out, c_out, kernel=1, relu=False)
        self.se = SEGate(c_out, ratio)
        self.skip = nn.Identity() if stride == 1 and c_in == c_out else \
            ConvBNReLU(c_in, c_out, kernel=1, stride=stride, relu=False)

    def forward(self, x):
        return torch.relu(self.se(self.expand(self.grouped(self.reduce(x)))) + self.skip(x))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers: list[nn.Module] = []
        widths, blocks = cfg.stage_widths, cfg.blocks_per_stage
        last = len(widths) - 1
        if cfg.kind == "plain_conv":
            c = 3
            for i, (w, n) in enumerate(zip(widths, blocks)):
                for j in range(n):
                    layers.append(ConvBNReLU(c if j == 0 else w, w))
                c = w
                if i < last:
                    layers.append(nn.MaxPool2d(2))
        elif cfg.kind == "dense_block":
            c = 3
            for i, (w, n) in enumerate(zip(widths, blocks)):
                layers.append(DenseStage(c, w, n, cfg.growth))
                c = w
                if i < last:
                    layers.append(nn.MaxPool2d(2))
        else:
            stem = max(widths[0] // 2, 1)
            layers += [ConvBNReLU(3, stem), nn.MaxPool2d(2)]
            c = stem
            for i, (w, n) in enumerate(zip(widths, blocks)):
                for j in range(n):
                    stride = 2 if i > 0 and j == 0 else 1
                    if cfg.kind == "se_residual":
                        layers.append(SEResidualBlock(c, w, stride, cfg.se_ratio))
                    else:
                        layers.append(SEGroupedBlock(c, w, stride, cfg.se_ratio, cfg.cardinality))
                    c = w
        self.body = nn.Sequential(*layers)

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def feature_map(self, x):
        return self.body(x)

    def forward(self, x):
        fmap = self.body(x)
        return fmap, fmap.mean(dim=(2, 3))


class Classifier(nn.Module):
    """Backbones -> concatenated pooled features -> MLP head -> logits.

    ``head_hidden == 0`` gives a plain linear head.
    """

    def __init__(self, backbones: list[Backbone], head_hidden: int = 256, dropout_rate: float = 0.3,
                 n_classes: int = N_CLASSES, name: str = "classifier"):
        super().__init__()
        if not backbones:
            raise ConfigError("a classifier needs at least one backbone")
        self.backbones = nn.ModuleList(backbones)
        self.head_input_dim = sum(b.feature_dim for b in backbones)
        self.head_hidden = head_hidden
        self.dropout_rate = dropout_rate
        self.n_classes = n_classes
        self.name = name
        if head_hidden:
            self.head = nn.Sequential(
                nn.Linear(self.head_input_dim, head_hidden),
                nn.ReLU(inplace=True),
                nn.Dropout(dropout_rate),
                nn.Linear(head_hidden, n_classes),
            )
        else:
            self.head = nn.Sequential(nn.Linear(self.head_input_dim, n_classes))
        self.frozen_backbones = False

    def freeze_backbones(self, frozen: bool = True) -> "Classifier":
        self.frozen_backbones = frozen
        for p in self.backbones.parameters():
            p.requires_grad_(not frozen)
        self.train(self.training)
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen_backbones:
            self.backbones.eval()
        return self

    def feature_maps(self, x) -> list[torch.Tensor]:
        return [b.feature_map(x) for b in self.backbones]

    def head_from_maps(self, maps) -> torch.Tensor:
        pooled = torch.cat([m.mean(dim=(2, 3)) for m in maps], dim=1)
        if pooled.shape[1] != self.head_input_dim:
            raise ConfigError(f"head expects {self.head_input_dim} features, got {pooled.shape[1]}")
        return self.head(pooled)

    def pooled_features(self, x) -> torch.Tensor:
        return torch.cat([b(x)[1] for b in self.backbones], dim=1)

    def forward(self, x):
        return self.head_from_maps(self.feature_maps(x))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "backbones": [b.cfg.to_dict() for b in self.backbones],
            "head_hidden": self.head_hidden,
            "dropout_rate": self.dropout_rate,
            "n_classes": self.n_classes,
            "head_input_dim": self.head_input_dim,
        }


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Seeded fan-in-scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in)
    for conv and linear weights, zero biases, unit BN scale."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return module


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    return init_parameters(Backbone(cfg), seed)


def build_classifier(backbones, head_hidden=256, dropout_rate=0.3, seed=0, name="classifier") -> Classifier:
    """Wrap already-built backbones with a freshly initialised head."""
    model = Classifier(list(backbones), head_hidden, dropout_rate, name=name)
    init_parameters(model.head, seed)
    return model


def build_backbone_classifier(cfg: BackboneConfig, head_hidden=256, dropout_rate=0.3, seed=0) -> Classifier:
    """Standalone backbone with the same kind of MLP head the ensemble uses."""
    return build_classifier([build_backbone(cfg, seed)], head_hidden, dropout_rate, seed + 1, name=cfg.kind)


def build_ensemble(cfg: EnsembleConfig, seed: int = 0) -> Classifier:
    cfg.validate()
    backbones = [build_backbone(b, seed + i) for i, b in enumerate(cfg.backbones)]
    return build_classifier(backbones, cfg.head_hidden, cfg.dropout_rate, seed + len(backbones), name="EmoXNet")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_student(cfg: StudentConfig = StudentConfig(), seed: int = 0, teacher_params: int | None = None) -> Classifier:
    """Small plain-conv classifier with a linear head.

    When ``teacher_params`` is given the student must stay within
    ``cfg.max_param_ratio`` of it.
    """
    backbone = build_backbone(cfg.backbone(), seed)
    model = build_classifier([backbone], head_hidden=0, dropout_rate=0.0, seed=seed + 1, name="EmoXNetLite")
    if teacher_params is not None:
        n = count_parameters(model)
        if n > cfg.max_param_ratio * teacher_params:
            raise ConfigError(
                f"student has {n} parameters, teacher {teacher_params}: "
                f"ratio {n / teacher_params:.3f} exceeds {cfg.max_param_ratio}"
            )
    return model


def classifier_from_description(desc: dict) -> Classifier:
    backbones = [Backbone(BackboneConfig.from_dict(b)) for b in desc["backbones"]]
    model = Classifier(backbones, desc["head_hidden"], desc["dropout_rate"], desc.get("n_classes", N_CLASSES),
                       name=desc.get("name", "classifier"))
    return model


def to_tensor(images) -> torch.Tensor:
    """``(B, H, W, C)`` numpy batch -> ``(B, C, H, W)`` float32 tensor."""
    arr = np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr)


def logits_numpy(model: nn.Module, images, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(model(to_tensor(images[i:i + batch_size])).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def forward_ensemble(model: Classifier, images, batch_size: int = 256) -> np.ndarray:
    """Class probabilities ``(B, 7)`` in inference mode (dropout off)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ConfigError(f"expected a (B, H, W, 3) batch, got {images.shape}")
    return stable_softmax(logits_numpy(model, images, batch_size))
