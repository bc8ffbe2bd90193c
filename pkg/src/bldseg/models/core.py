from __future__ import annotations

import numpy as np
import torch
from torch import nn

from ..raster import NormalizationSpec
from .decoders import DecoderSpec, DeepLabV3PlusDecoder, Upsample, UNetPlusPlusDecoder
from .encoders import Encoder, EncoderSpec


class BuildError(ValueError):
    pass


class PaddingError(ValueError):
    """Input spatial size is not a multiple of the encoder's total stride."""


class SegmentationModel(nn.Module):
    """Encoder + decoder + single-channel logistic head.

    Takes normalized B x 3 x H x W batches and returns building probabilities B x 1 x H x W.
    """

    def __init__(self, encoder_spec: EncoderSpec, decoder_spec: DecoderSpec, normalization: NormalizationSpec | None = None):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.decoder_spec = decoder_spec
        self.normalization = normalization or NormalizationSpec()
        self.encoder = Encoder(encoder_spec)
        chans = self.encoder.out_channels
        if decoder_spec.kind == "unetpp":
            depth = decoder_spec.nested_depth
            if depth is not None and depth != len(chans):
                raise BuildError(
                    f"U-Net++ nested depth {depth} does not match the {len(chans)} stages of encoder {encoder_spec.name}"
                )
            self.decoder = UNetPlusPlusDecoder(chans, decoder_spec.upsample)
        else:
            if not (0 <= decoder_spec.low_level_stage < len(chans) - 1):
                raise BuildError(
                    f"low-level stage {decoder_spec.low_level_stage} invalid for {len(chans)}-stage encoder {encoder_spec.name}"
                )
            aspp = decoder_spec.aspp_channels or max(8, round(256 * encoder_spec.width_multiplier))
            self.decoder = DeepLabV3PlusDecoder(
                chans, aspp, decoder_spec.atrous_rates, decoder_spec.low_level_stage, decoder_spec.upsample
            )
        c = self.decoder.out_channels
        self.final_up = Upsample(c, c, decoder_spec.upsample)
        self.head = nn.Conv2d(c, 1, 1)
        self.required_multiple = self.encoder.strides[-1]
        init_weights(self)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        y = self.decoder(self.encoder(x))
        return self.head(self.final_up(y, size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def spec_dict(self) -> dict:
        return {
            "encoder": self.encoder_spec.to_dict(),
            "decoder": self.decoder_spec.to_dict(),
            "normalization": self.normalization.to_dict(),
        }


def init_weights(model: nn.Module) -> None:
    """Variance scaling for convolutions, zero biases, unit BatchNorm scale."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(
    encoder: EncoderSpec,
    decoder: DecoderSpec,
    normalization: NormalizationSpec | None = None,
    seed: int | None = None,
) -> SegmentationModel:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return SegmentationModel(encoder, decoder, normalization)
    return SegmentationModel(encoder, decoder, normalization)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def check_input(model: SegmentationModel, batch: torch.Tensor) -> None:
    m = model.required_multiple
    h, w = batch.shape[-2:]
    if h % m or w % m:
        raise PaddingError(f"input {h}x{w} must be a multiple of {m}; pad to {-(-h // m) * m}x{-(-w // m) * m}")


def as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[1] != 3:
        raise ValueError(f"expected B x 3 x H x W input, got {tuple(t.shape)}")
    return t


@torch.no_grad()
def forward(model: SegmentationModel, batch) -> torch.Tensor:
    """Evaluation-mode probability maps for a normalized batch."""
    x = as_batch(batch)
    check_input(model, x)
    was_training = model.training
    model.eval()
    try:
        return model(x)
    finally:
        model.train(was_training)


@torch.no_grad()
def extract_stage_activations(model: SegmentationModel, image) -> list[torch.Tensor]:
    """Encoder stage outputs (1 x C x H/s x W/s each) for a single normalized image."""
    x = as_batch(image)
    if x.shape[0] != 1:
        raise ValueError("extract_stage_activations takes a single image")
    was_training = model.training
    model.eval()
    try:
        return model.encoder(x)
    finally:
        model.train(was_training)


def channel_mean(activation: torch.Tensor) -> np.ndarray:
    """Collapse a 1 x C x H x W activation to an H x W map scaled to [0, 1]."""
    m = activation[0].mean(dim=0).cpu().numpy().astype(np.float64)
    lo, hi = m.min(), m.max()
    return np.zeros_like(m) if hi - lo < 1e-12 else (m - lo) / (hi - lo)


__all__ = [
    "BuildError",
    "PaddingError",
    "SegmentationModel",
    "build_model",
    "count_parameters",
    "forward",
    "extract_stage_activations",
    "channel_mean",
]
