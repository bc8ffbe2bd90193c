"""Single-file model archives: declarative spec (JSON) plus one .npy blob per state entry."""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from ..raster import NormalizationSpec
from .core import SegmentationModel
from .decoders import DecoderSpec
from .encoders import EncoderSpec


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SegmentationModel, path: str | os.PathLike, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    index = {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")} for k, v in state.items()}
    tmp = path.with_name(path.name + ".tmp")
    # fixed timestamps keep archives byte-identical across runs
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name: str, data: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        put("spec.json", json.dumps(model.spec_dict(), indent=2, sort_keys=True))
        put("index.json", json.dumps(index, indent=2, sort_keys=True))
        put("metadata.json", json.dumps(metadata or {}, indent=2, sort_keys=True, default=str))
        for key, value in state.items():
            buf = io.BytesIO()
            np.save(buf, value.detach().cpu().numpy(), allow_pickle=False)
            put(f"params/{key}.npy", buf.getvalue())
    os.replace(tmp, path)
    return path


def read_metadata(path: str | os.PathLike) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("metadata.json"))


def load_checkpoint(path: str | os.PathLike) -> tuple[SegmentationModel, dict]:
    """Rebuild the model from its spec, check the graph matches the stored blobs, then load weights."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path) as zf:
        spec = json.loads(zf.read("spec.json"))
        index = json.loads(zf.read("index.json"))
        metadata = json.loads(zf.read("metadata.json"))
        model = SegmentationModel(
            EncoderSpec.from_dict(spec["encoder"]),
            DecoderSpec.from_dict(spec["decoder"]),
            NormalizationSpec.from_dict(spec["normalization"]),
        )
        expected = {k: list(v.shape) for k, v in model.state_dict().items()}
        stored = {k: v["shape"] for k, v in index.items()}
        if expected != stored:
            missing = sorted(set(expected) - set(stored))
            extra = sorted(set(stored) - set(expected))
            shape = sorted(k for k in set(expected) & set(stored) if expected[k] != stored[k])
            raise CheckpointError(
                f"spec/graph mismatch in {path}: missing={missing[:5]} unexpected={extra[:5]} shape={shape[:5]}"
            )
        state = {}
        for key in index:
            arr = np.load(io.BytesIO(zf.read(f"params/{key}.npy")), allow_pickle=False)
            state[key] = torch.from_numpy(arr)
    model.load_state_dict(state)
    model.eval()
    return model, metadata
