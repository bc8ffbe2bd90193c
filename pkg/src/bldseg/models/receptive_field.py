"""Analytic receptive-field calculator for stacks of convolution/pooling layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class LayerConfig:
    kernel: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    kind: str = "conv"
    name: str = ""

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError(f"invalid layer {self}: kernel, stride and dilation must be >= 1")
        if self.padding < 0:
            raise ValueError(f"invalid layer {self}: padding must be >= 0")

    @property
    def effective_kernel(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)


def receptive_field_trace(layers: Sequence[LayerConfig]) -> list[tuple[LayerConfig, int, int]]:
    """(layer, receptive field, cumulative stride) after each layer."""
    if not layers:
        raise ValueError("receptive field needs at least one layer")
    r, j = 1, 1
    trace = []
    for layer in layers:
        if not isinstance(layer, LayerConfig):
            raise TypeError(f"expected LayerConfig, got {type(layer).__name__}")
        r += (layer.effective_kernel - 1) * j
        j *= layer.stride
        trace.append((layer, r, j))
    return trace


def receptive_field(layers: Sequence[LayerConfig]) -> int:
    return receptive_field_trace(layers)[-1][1]


def stage_table(stages: Iterable[tuple[str, Sequence[LayerConfig]]]) -> list[dict]:
    """Receptive field and stride at the end of each named stage of a forward-ordered stack."""
    rows, flat = [], []
    for name, layers in stages:
        flat.extend(layers)
        _, r, j = receptive_field_trace(flat)[-1]
        rows.append({"stage": name, "layers": len(flat), "stride": j, "receptive_field": r})
    return rows
