"""U-Net++ and DeepLabV3+ decoders over a list of encoder stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import conv_bn_act

DECODERS = ("unetpp", "deeplabv3plus")


@dataclass(frozen=True)
class DecoderSpec:
    kind: str = "unetpp"
    nested_depth: int | None = None  # unetpp: None means "match the encoder"
    atrous_rates: tuple[int, ...] = (6, 12, 18)
    aspp_channels: int | None = None  # deeplabv3plus: None scales 256 by the encoder width
    low_level_stage: int = 1  # deeplabv3plus skip source (stride 4)
    upsample: str = "bilinear"

    def __post_init__(self):
        if self.kind not in DECODERS:
            raise ValueError(f"unknown decoder {self.kind!r}; choose from {DECODERS}")
        rates = tuple(int(r) for r in self.atrous_rates)
        if any(r <= 0 for r in rates) or len(set(rates)) != len(rates):
            raise ValueError(f"atrous rates must be positive and distinct, got {rates}")
        object.__setattr__(self, "atrous_rates", rates)
        if self.upsample not in ("bilinear", "transpose"):
            raise ValueError("upsample must be 'bilinear' or 'transpose'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSpec":
        d = dict(d)
        if "atrous_rates" in d:
            d["atrous_rates"] = tuple(d["atrous_rates"])
        return cls(**d)


class Upsample(nn.Module):
    """x2 (or to a target size) resize followed by a 3x3 convolution."""

    def __init__(self, cin, cout, mode="bilinear"):
        super().__init__()
        self.mode = mode
        if mode == "transpose":
            self.up = nn.ConvTranspose2d(cin, cin, 2, 2)
        self.conv = conv_bn_act(cin, cout, 3)

    def forward(self, x, size):
        if self.mode == "transpose":
            x = self.up(x)
            if x.shape[-2:] != size:
                x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        else:
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.conv(x)


def double_conv(cin, cout):
    return nn.Sequential(conv_bn_act(cin, cout, 3), conv_bn_act(cout, cout, 3))


class UNetPlusPlusDecoder(nn.Module):
    """Nested dense skip grid. Node X(i,j) sees X(i,0..j-1) and the upsampled X(i+1,j-1)."""

    def __init__(self, channels: list[int], mode="bilinear"):
        super().__init__()
        self.levels = n = len(channels)
        self.channels = channels
        self.nodes = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        self.graph: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for j in range(1, n):
            for i in range(n - j):
                key = f"{i}_{j}"
                self.ups[key] = Upsample(channels[i + 1], channels[i], mode)
                self.nodes[key] = double_conv(channels[i] * (j + 1), channels[i])
                self.graph[(i, j)] = [(i, k) for k in range(j)] + [(i + 1, j - 1)]
        self.out_channels = channels[0]

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = {(i, 0): f for i, f in enumerate(feats)}
        for j in range(1, self.levels):
            for i in range(self.levels - j):
                key = f"{i}_{j}"
                *same_level, below = self.graph[(i, j)]
                up = self.ups[key](x[below], x[(i, 0)].shape[-2:])
                x[(i, j)] = self.nodes[key](torch.cat([x[s] for s in same_level] + [up], dim=1))
        return x[(0, self.levels - 1)]


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates=(6, 12, 18)):
        super().__init__()
        self.branches = nn.ModuleList([conv_bn_act(cin, cout, 1)])
        for r in rates:
            self.branches.append(conv_bn_act(cin, cout, 3, dilation=r))
        # no norm on the pooled branch: it is 1x1 and batch-1 training would break BatchNorm
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU())
        self.concat_channels = cout * (len(rates) + 2)
        self.project = conv_bn_act(self.concat_channels, cout, 1)

    def branch_outputs(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return outs

    def forward(self, x):
        return self.project(torch.cat(self.branch_outputs(x), dim=1))


class DeepLabV3PlusDecoder(nn.Module):
    def __init__(self, channels: list[int], aspp_channels: int, rates=(6, 12, 18), low_level_stage=1, mode="bilinear"):
        super().__init__()
        self.low_level_stage = low_level_stage
        low_ch = max(4, round(aspp_channels * 48 / 256))
        self.aspp = ASPP(channels[-1], aspp_channels, rates)
        self.up_aspp = Upsample(aspp_channels, aspp_channels, mode)
        self.reduce = conv_bn_act(channels[low_level_stage], low_ch, 1)
        self.fuse = nn.Sequential(
            conv_bn_act(aspp_channels + low_ch, aspp_channels, 3),
            conv_bn_act(aspp_channels, aspp_channels, 3),
        )
        self.out_channels = aspp_channels

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        low = feats[self.low_level_stage]
        high = self.up_aspp(self.aspp(feats[-1]), low.shape[-2:])
        return self.fuse(torch.cat([high, self.reduce(low)], dim=1))
