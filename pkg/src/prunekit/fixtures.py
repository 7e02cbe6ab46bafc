"""Seeded toy two-component checkpoint for demos and tests.

The model is one feed-forward chain: two text-encoder linears feed three
image-generator linears. A conv-shaped tensor, biases and an embedding ride
along unused so that manifest rules and the prunable policy have something
to exclude.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import LayerSpec, ToyModelSpec, save_model_spec, write_calibration
from .container import Checkpoint, write_checkpoint
from .manifest import IMAGE_GENERATOR, TEXT_ENCODER, Manifest, PrunablePolicy, Rule, save_manifest

INPUT_DIM = 16
_LINEARS = [
    # (name, outputs, inputs, activation after)
    ("text.fc1", 32, 16, "gelu"),
    ("text.fc2", 32, 32, "gelu"),
    ("unet.fc1", 48, 32, "relu"),
    ("unet.fc2", 48, 48, "relu"),
    ("unet.fc3", 16, 48, None),
]


@dataclass
class ToyFixture:
    checkpoint: Checkpoint
    manifest: Manifest
    spec: ToyModelSpec
    calibration: np.ndarray

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "checkpoint": out / "toy.safetensors",
            "manifest": out / "manifest.json",
            "spec": out / "model.json",
            "calibration": out / "calib.bin",
        }
        write_checkpoint(self.checkpoint, paths["checkpoint"])
        save_manifest(self.manifest, paths["manifest"])
        save_model_spec(self.spec, paths["spec"])
        write_calibration(paths["calibration"], self.calibration)
        return paths


def toy_manifest() -> Manifest:
    return Manifest(
        rules=(Rule("text.*", TEXT_ENCODER), Rule("unet.*", IMAGE_GENERATOR)),
        prunable=PrunablePolicy(min_rank=2, exclude_patterns=("*embed*",)),
    )


def make_toy_fixture(seed: int = 42, calib_rows: int = 256) -> ToyFixture:
    rng = np.random.default_rng(seed)
    arrays = {"text.tok_embed.weight": rng.normal(0.0, 0.02, (64, INPUT_DIM))}
    layers = []
    for name, n_out, n_in, act in _LINEARS:
        w = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_out, n_in))
        # a few large weights per layer give the outlier scan something to find
        hot = rng.choice(w.size, size=max(1, w.size // 100), replace=False)
        w.flat[hot] *= 8.0
        arrays[f"{name}.weight"] = w
        arrays[f"{name}.bias"] = rng.normal(0.0, 0.01, n_out)
        layers.append(LayerSpec("linear", f"{name}.weight", f"{name}.bias"))
        if act:
            layers.append(LayerSpec(act))
    arrays["unet.conv_in.weight"] = rng.normal(0.0, 0.2, (8, 4, 3, 3))

    calib = rng.normal(0.0, 1.0, (calib_rows, INPUT_DIM))
    # heavy input features
    calib[:, :2] *= 6.0
    return ToyFixture(
        checkpoint=Checkpoint.from_arrays(arrays),
        manifest=toy_manifest(),
        spec=ToyModelSpec(tuple(layers), INPUT_DIM),
        calibration=calib.astype(np.float32),
    )
