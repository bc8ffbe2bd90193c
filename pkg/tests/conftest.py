import json

import pytest
import torch

from bldseg.raster import DatasetManifest
from bldseg.toy import make_toy_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_toy(tmp_path_factory):
    """20 train (18 + 2 val) / 6 test tiles of 64 px, plus the 2x zoomed test set."""
    root = tmp_path_factory.mktemp("tiny_toy")
    paths = make_toy_dataset(root, n_train=20, n_test=6, size=64, seed=3)
    return {"root": root, **paths}


@pytest.fixture(scope="session")
def tiny_arrays(tiny_toy):
    m = DatasetManifest.load(tiny_toy["manifest"])
    return {split: m.load_split(split)[:2] for split in ("train", "val", "test")}


def write_config(path, manifest, max_epochs=2, **trainer):
    cfg = {
        "data": {"manifest": str(manifest), "tile_size": 64},
        "model": {"encoder": "vgg", "variant": "16", "width_multiplier": 0.125, "decoder": "unetpp"},
        "loss": {"kind": "weighted_dice"},
        "augmentation": {"apply_probability": 0.5, "epoch_max": max_epochs},
        "trainer": {"batch_size": 8, "learning_rate": 1e-4, "max_epochs": max_epochs, "seed": 0, **trainer},
    }
    path.write_text(json.dumps(cfg, indent=2))
    return path
