from .checkpoint import CheckpointError, load_checkpoint, read_metadata, save_checkpoint
from .core import (
    BuildError,
    PaddingError,
    SegmentationModel,
    build_model,
    channel_mean,
    count_parameters,
    extract_stage_activations,
    forward,
)
from .decoders import DecoderSpec
from .encoders import EncoderSpec, encoder_spec, parse_encoder_name
from .receptive_field import LayerConfig, receptive_field, receptive_field_trace

__all__ = [
    "BuildError",
    "CheckpointError",
    "DecoderSpec",
    "EncoderSpec",
    "LayerConfig",
    "PaddingError",
    "SegmentationModel",
    "build_model",
    "channel_mean",
    "count_parameters",
    "encoder_spec",
    "extract_stage_activations",
    "forward",
    "load_checkpoint",
    "parse_encoder_name",
    "read_metadata",
    "receptive_field",
    "receptive_field_trace",
    "save_checkpoint",
]
