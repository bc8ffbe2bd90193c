"""Declarative encoder descriptions and the feature extractors built from them.

Every encoder yields five feature stages at strides 2, 4, 8, 16 and 32. The same
description drives both the torch module and the receptive-field calculator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .receptive_field import LayerConfig, stage_table

FAMILIES = ("vgg", "resnet", "efficientnet", "mobilenet")
PADDING_MODE = "replicate"


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # conv | maxpool | basic | bottleneck | mbconv
    out_channels: int = 0
    stride: int = 1
    kernel: int = 3
    dilation: int = 1
    padding: int = 0  # maxpool only; convolutions pad to preserve size
    mid_channels: int = 0  # bottleneck width
    expand: int = 1  # mbconv expansion ratio

    def layers(self) -> list[LayerConfig]:
        """Maximal-path layers for receptive-field purposes (identity skips ignored)."""
        k, s, d = self.kernel, self.stride, self.dilation
        same = (k + (k - 1) * (d - 1) - 1) // 2
        if self.kind == "conv":
            return [LayerConfig(k, s, d, same, "conv")]
        if self.kind == "maxpool":
            return [LayerConfig(k, s, 1, self.padding, "maxpool")]
        if self.kind == "basic":
            return [LayerConfig(3, s, 1, 1), LayerConfig(3, 1, 1, 1)]
        if self.kind == "bottleneck":
            # stride on the leading 1x1, as in the original ResNet v1 layout
            return [LayerConfig(1, s), LayerConfig(3, 1, d, d), LayerConfig(1)]
        if self.kind == "mbconv":
            expand = [LayerConfig(1)] if self.expand > 1 else []
            return expand + [LayerConfig(k, s, d, same, "depthwise"), LayerConfig(1)]
        raise ValueError(f"unknown block kind {self.kind!r}")


@dataclass(frozen=True)
class StageSpec:
    name: str
    blocks: tuple[BlockSpec, ...]

    def layers(self) -> list[LayerConfig]:
        return [layer for b in self.blocks for layer in b.layers()]


@dataclass(frozen=True)
class EncoderSpec:
    family: str
    variant: str
    width_multiplier: float = 1.0
    stages: tuple[StageSpec, ...] = field(default=())
    activation: str = "relu"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}; choose from {FAMILIES}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if len(self.stages) < 4:
            raise ValueError(f"encoder needs >= 4 stages, got {len(self.stages)}")

    @property
    def name(self) -> str:
        return f"{self.family}{self.variant}"

    def stage_strides(self) -> list[int]:
        return [row["stride"] for row in self.rf_table()]

    def stage_channels(self, in_channels: int = 3) -> list[int]:
        chans, c = [], in_channels
        for stage in self.stages:
            for b in stage.blocks:
                if b.kind != "maxpool":
                    c = b.out_channels
            chans.append(c)
        return chans

    @property
    def total_stride(self) -> int:
        return self.stage_strides()[-1]

    def layers(self) -> list[LayerConfig]:
        return [layer for s in self.stages for layer in s.layers()]

    def rf_table(self) -> list[dict]:
        return stage_table((s.name, s.layers()) for s in self.stages)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        stages = tuple(
            StageSpec(s["name"], tuple(BlockSpec(**b) for b in s["blocks"])) for s in d["stages"]
        )
        return cls(d["family"], str(d["variant"]), float(d["width_multiplier"]), stages, d.get("activation", "relu"))


# ---------------------------------------------------------------------------
# family tables

VGG_CFGS = {
    "11": [[64], [128], [256, 256], [512, 512], [512, 512]],
    "13": [[64, 64], [128, 128], [256, 256], [512, 512], [512, 512]],
    "16": [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]],
    "19": [[64, 64], [128, 128], [256] * 4, [512] * 4, [512] * 4],
}

RESNET_CFGS = {
    # block kind, blocks per layer
    "18": ("basic", [2, 2, 2, 2]),
    "34": ("basic", [3, 4, 6, 3]),
    "50": ("bottleneck", [3, 4, 6, 3]),
    "101": ("bottleneck", [3, 4, 23, 3]),
}

# (expand, channels, repeats, stride, kernel) per inverted-residual stage, plus the
# output stage index each one belongs to (strides 2, 4, 8, 16, 32)
EFFICIENTNET_BASE = [
    (1, 16, 1, 1, 3, 0),
    (6, 24, 2, 2, 3, 1),
    (6, 40, 2, 2, 5, 2),
    (6, 80, 3, 2, 3, 3),
    (6, 112, 3, 1, 5, 3),
    (6, 192, 4, 2, 5, 4),
    (6, 320, 1, 1, 3, 4),
]
# compound coefficients (width, depth)
EFFICIENTNET_SCALING = {
    "b0": (1.0, 1.0),
    "b1": (1.0, 1.1),
    "b2": (1.1, 1.2),
    "b3": (1.2, 1.4),
    "b4": (1.4, 1.8),
    "b5": (1.6, 2.2),
}
MOBILENET_V2 = [
    (1, 16, 1, 1, 3, 0),
    (6, 24, 2, 2, 3, 1),
    (6, 32, 3, 2, 3, 2),
    (6, 64, 4, 2, 3, 3),
    (6, 96, 3, 1, 3, 3),
    (6, 160, 3, 2, 3, 4),
    (6, 320, 1, 1, 3, 4),
]


def _ch(c: float, w: float) -> int:
    return max(1, int(round(c * w)))


def _ch8(c: float, w: float) -> int:
    # inverted-residual families keep channel counts divisible by 8
    return max(8, int(c * w + 4) // 8 * 8)


def _vgg(variant: str, w: float) -> tuple[StageSpec, ...]:
    stages = []
    for i, convs in enumerate(VGG_CFGS[variant]):
        blocks = [BlockSpec("conv", _ch(c, w)) for c in convs]
        blocks.append(BlockSpec("maxpool", kernel=2, stride=2))
        stages.append(StageSpec(f"block{i + 1}", tuple(blocks)))
    return tuple(stages)


def _resnet(variant: str, w: float) -> tuple[StageSpec, ...]:
    kind, counts = RESNET_CFGS[variant]
    expansion = 4 if kind == "bottleneck" else 1
    stages = [
        StageSpec("stem", (BlockSpec("conv", _ch(64, w), stride=2, kernel=7),)),
    ]
    for li, (n, planes) in enumerate(zip(counts, (64, 128, 256, 512))):
        blocks = [BlockSpec("maxpool", kernel=3, stride=2, padding=1)] if li == 0 else []
        for b in range(n):
            stride = 2 if (b == 0 and li > 0) else 1
            blocks.append(
                BlockSpec(kind, _ch(planes * expansion, w), stride=stride, mid_channels=_ch(planes, w))
            )
        stages.append(StageSpec(f"layer{li + 1}", tuple(blocks)))
    return tuple(stages)


def _inverted_residual(table, w: float, depth: float, stem: int) -> tuple[StageSpec, ...]:
    grouped: list[list[BlockSpec]] = [[BlockSpec("conv", _ch8(stem, w), stride=2)]] + [[] for _ in range(4)]
    for expand, c, repeats, stride, k, out_stage in table:
        for r in range(int(math.ceil(repeats * depth))):
            grouped[out_stage].append(
                BlockSpec("mbconv", _ch8(c, w), stride=stride if r == 0 else 1, kernel=k, expand=expand)
            )
    return tuple(StageSpec(f"stage{i + 1}", tuple(bs)) for i, bs in enumerate(grouped))


def encoder_spec(family: str, variant: str | int = "", width_multiplier: float = 1.0) -> EncoderSpec:
    """Named encoder description, e.g. ``encoder_spec("vgg", 16)`` or ``("efficientnet", "b3")``."""
    family = family.lower()
    variant = str(variant).lower()
    if family == "vgg":
        variant = variant or "16"
        if variant not in VGG_CFGS:
            raise ValueError(f"unknown VGG depth {variant!r}; choose from {sorted(VGG_CFGS)}")
        return EncoderSpec("vgg", variant, width_multiplier, _vgg(variant, width_multiplier))
    if family == "resnet":
        variant = variant or "18"
        if variant not in RESNET_CFGS:
            raise ValueError(f"unknown ResNet depth {variant!r}; choose from {sorted(RESNET_CFGS)}")
        return EncoderSpec("resnet", variant, width_multiplier, _resnet(variant, width_multiplier))
    if family == "efficientnet":
        variant = variant or "b0"
        if variant not in EFFICIENTNET_SCALING:
            raise ValueError(f"unknown EfficientNet index {variant!r}; choose from {sorted(EFFICIENTNET_SCALING)}")
        wc, dc = EFFICIENTNET_SCALING[variant]
        stages = _inverted_residual(EFFICIENTNET_BASE, width_multiplier * wc, dc, 32)
        return EncoderSpec("efficientnet", variant, width_multiplier, stages, activation="silu")
    if family == "mobilenet":
        variant = variant or "v2"
        if variant != "v2":
            raise ValueError("only MobileNet v2 is available")
        stages = _inverted_residual(MOBILENET_V2, width_multiplier, 1.0, 32)
        return EncoderSpec("mobilenet", variant, width_multiplier, stages, activation="relu6")
    raise ValueError(f"unknown encoder family {family!r}; choose from {FAMILIES}")


def parse_encoder_name(name: str) -> tuple[str, str]:
    """'vgg16' -> ('vgg', '16'), 'efficientnet-b3' -> ('efficientnet', 'b3')."""
    name = name.lower().replace("-", "").replace("_", "")
    for fam in FAMILIES:
        if name.startswith(fam):
            return fam, name[len(fam):]
    raise ValueError(f"cannot parse encoder name {name!r}")


# ---------------------------------------------------------------------------
# torch modules


def make_activation(name: str) -> nn.Module:
    return {"relu": nn.ReLU, "relu6": nn.ReLU6, "silu": nn.SiLU}[name](inplace=False)


def conv_bn_act(cin, cout, kernel=3, stride=1, dilation=1, groups=1, act="relu"):
    pad = dilation * (kernel - 1) // 2
    layers = [
        nn.Conv2d(cin, cout, kernel, stride, pad, dilation, groups, bias=False, padding_mode=PADDING_MODE),
        nn.BatchNorm2d(cout),
    ]
    if act:
        layers.append(make_activation(act))
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, act="relu"):
        super().__init__()
        self.conv1 = conv_bn_act(cin, cout, 3, stride, act=act)
        self.conv2 = conv_bn_act(cout, cout, 3, act=None)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = conv_bn_act(cin, cout, 1, stride, act=None)
        self.act = make_activation(act)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return self.act(self.conv2(self.conv1(x)) + identity)


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, mid, stride=1, dilation=1, act="relu"):
        super().__init__()
        self.conv1 = conv_bn_act(cin, mid, 1, stride, act=act)
        self.conv2 = conv_bn_act(mid, mid, 3, 1, dilation, act=act)
        self.conv3 = conv_bn_act(mid, cout, 1, act=None)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = conv_bn_act(cin, cout, 1, stride, act=None)
        self.act = make_activation(act)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return self.act(self.conv3(self.conv2(self.conv1(x))) + identity)


class MBConv(nn.Module):
    """Inverted residual: 1x1 expand, depthwise kxk, 1x1 linear projection."""

    def __init__(self, cin, cout, kernel=3, stride=1, expand=6, act="relu6"):
        super().__init__()
        hidden = cin * expand
        layers = []
        if expand > 1:
            layers.append(conv_bn_act(cin, hidden, 1, act=act))
        layers.append(conv_bn_act(hidden, hidden, kernel, stride, groups=hidden, act=act))
        layers.append(conv_bn_act(hidden, cout, 1, act=None))
        self.body = nn.Sequential(*layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.body(x)
        return x + out if self.residual else out


def build_block(block: BlockSpec, cin: int, act: str) -> tuple[nn.Module, int]:
    if block.kind == "conv":
        return conv_bn_act(cin, block.out_channels, block.kernel, block.stride, block.dilation, act=act), block.out_channels
    if block.kind == "maxpool":
        return nn.MaxPool2d(block.kernel, block.stride, block.padding), cin
    if block.kind == "basic":
        return BasicBlock(cin, block.out_channels, block.stride, act), block.out_channels
    if block.kind == "bottleneck":
        return Bottleneck(cin, block.out_channels, block.mid_channels, block.stride, block.dilation, act), block.out_channels
    if block.kind == "mbconv":
        return MBConv(cin, block.out_channels, block.kernel, block.stride, block.expand, act), block.out_channels
    raise ValueError(f"unknown block kind {block.kind!r}")


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec, in_channels: int = 3):
        super().__init__()
        self.spec = spec
        stages, c = [], in_channels
        for stage in spec.stages:
            mods = []
            for b in stage.blocks:
                m, c = build_block(b, c, spec.activation)
                mods.append(m)
            stages.append(nn.Sequential(*mods))
        self.stages = nn.ModuleList(stages)
        self.out_channels = spec.stage_channels(in_channels)
        self.strides = spec.stage_strides()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
