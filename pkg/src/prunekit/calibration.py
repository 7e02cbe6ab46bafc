"""Toy feed-forward runtime: activation-norm calibration and output divergence.

Norm convention: ``norms[j] = sqrt(sum over all calibration rows of x_j**2)``,
no per-sample averaging. Any positive per-layer rescale leaves Wanda
rankings unchanged.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Iterator

import numpy as np
from scipy.special import erf

from .container import Checkpoint

LINEAR, RELU, GELU = "linear", "relu", "gelu"
LAYER_KINDS = (LINEAR, RELU, GELU)
DIVERGENCE_EPS = 1e-12

CALIB_MAGIC = b"CALB"
_CALIB_HEADER = struct.Struct("<4sII4x")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    weight_name: str | None = None
    bias_name: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {', '.join(LAYER_KINDS)}")
        if self.kind == LINEAR and not self.weight_name:
            raise ValueError("linear layers need a weight tensor name")
        if self.kind != LINEAR and (self.weight_name or self.bias_name):
            raise ValueError(f"{self.kind} layers take no tensors")


@dataclass(frozen=True)
class ToyModelSpec:
    layers: tuple[LayerSpec, ...]
    input_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelSpec":
        layers = [
            LayerSpec(l["kind"], l.get("weight"), l.get("bias"))
            for l in d["layers"]
        ]
        return cls(tuple(layers), int(d["input_dim"]))

    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            entry = {"kind": l.kind}
            if l.kind == LINEAR:
                entry["weight"] = l.weight_name
                if l.bias_name:
                    entry["bias"] = l.bias_name
            out.append(entry)
        return {"input_dim": self.input_dim, "layers": out}

    def linear_layers(self) -> list[str]:
        return [l.weight_name for l in self.layers if l.kind == LINEAR]

    def validate(self, ckpt: Checkpoint) -> None:
        """Check that tensors exist and dimensions chain."""
        width = self.input_dim
        for i, l in enumerate(self.layers):
            if l.kind != LINEAR:
                continue
            if l.weight_name not in ckpt:
                raise ValueError(f"layer {i}: missing weight tensor {l.weight_name!r}")
            W = ckpt[l.weight_name]
            if W.ndim != 2:
                raise ValueError(f"layer {i}: weight {l.weight_name!r} must be rank-2, got shape {W.shape}")
            if W.shape[1] != width:
                raise ValueError(
                    f"layer {i}: weight {l.weight_name!r} expects {W.shape[1]} inputs but receives {width}"
                )
            if l.bias_name is not None:
                if l.bias_name not in ckpt:
                    raise ValueError(f"layer {i}: missing bias tensor {l.bias_name!r}")
                if ckpt[l.bias_name].shape != (W.shape[0],):
                    raise ValueError(
                        f"layer {i}: bias {l.bias_name!r} shape {ckpt[l.bias_name].shape} != ({W.shape[0]},)"
                    )
            width = W.shape[0]


def load_model_spec(path: str | PathLike) -> ToyModelSpec:
    with open(path, encoding="utf-8") as fh:
        return ToyModelSpec.from_dict(json.load(fh))


def save_model_spec(spec: ToyModelSpec, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


@dataclass
class ForwardResult:
    output: np.ndarray
    layer_inputs: dict[str, np.ndarray] = field(default_factory=dict)


def forward(spec: ToyModelSpec, ckpt: Checkpoint, batch, record: bool = True) -> ForwardResult:
    """Run the chain in float64; ``layer_inputs`` is keyed by weight name."""
    spec.validate(ckpt)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"batch must be [rows x {spec.input_dim}], got shape {x.shape}")
    inputs = {}
    for l in spec.layers:
        if l.kind == LINEAR:
            if record:
                inputs[l.weight_name] = x
            W = ckpt[l.weight_name].data.astype(np.float64)
            x = x @ W.T
            if l.bias_name is not None:
                x = x + ckpt[l.bias_name].data.astype(np.float64)
        elif l.kind == RELU:
            x = np.maximum(x, 0.0)
        else:
            x = _gelu(x)
    return ForwardResult(x, inputs)


@dataclass
class LayerActivationStats:
    layer: str
    sq_sum: np.ndarray
    rows_seen: int = 0

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(self.sq_sum)

    def update(self, x: np.ndarray) -> None:
        self.sq_sum = self.sq_sum + np.square(x).sum(axis=0)
        self.rows_seen += x.shape[0]

    def merge(self, other: "LayerActivationStats") -> None:
        self.sq_sum = self.sq_sum + other.sq_sum
        self.rows_seen += other.rows_seen


def _batch_stats(spec, ckpt, batch) -> dict[str, LayerActivationStats]:
    res = forward(spec, ckpt, batch)
    out = {}
    for name, x in res.layer_inputs.items():
        st = LayerActivationStats(name, np.zeros(x.shape[1]))
        st.update(x)
        out[name] = st
    return out


def accumulate_norms(
    spec: ToyModelSpec,
    ckpt: Checkpoint,
    data_stream: Iterable,
    threads: int = 1,
    deterministic: bool = True,
) -> dict[str, LayerActivationStats]:
    """Accumulate per-input-feature squared sums over every calibration batch.

    With ``deterministic`` (or one thread) batches are folded in stream order
    and the result is bit-exact run to run. Otherwise batches run on a thread
    pool and merge in completion order.
    """
    stats: dict[str, LayerActivationStats] = {}

    def fold(part):
        for name, st in part.items():
            if name in stats:
                stats[name].merge(st)
            else:
                stats[name] = st

    if deterministic or threads <= 1:
        for batch in data_stream:
            fold(_batch_stats(spec, ckpt, batch))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_batch_stats, spec, ckpt, b) for b in data_stream]
            for fut in as_completed(futures):
                fold(fut.result())
    if not stats or all(st.rows_seen == 0 for st in stats.values()):
        raise ValueError("calibration stream is empty; at least one row is required")
    return {name: stats[name] for name in spec.linear_layers() if name in stats}


def output_divergence(spec: ToyModelSpec, dense: Checkpoint, pruned: Checkpoint, batch) -> dict[str, float]:
    """Relative L2 error of pruned vs dense outputs per row; mean and max over rows."""
    for name in spec.linear_layers() + [l.bias_name for l in spec.layers if l.bias_name]:
        if name in dense and name in pruned and dense[name].shape != pruned[name].shape:
            raise ValueError(f"tensor {name!r} differs in shape between dense and pruned checkpoints")
    y_dense = forward(spec, dense, batch, record=False).output
    y_pruned = forward(spec, pruned, batch, record=False).output
    num = np.linalg.norm(y_dense - y_pruned, axis=1)
    den = np.maximum(np.linalg.norm(y_dense, axis=1), DIVERGENCE_EPS)
    rel = num / den
    return {"mean_rel_l2": float(rel.mean()), "max_rel_l2": float(rel.max())}


# -- file formats --------------------------------------------------------------


def write_calibration(path: str | PathLike, rows) -> None:
    data = np.ascontiguousarray(rows, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("calibration data must be a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(_CALIB_HEADER.pack(CALIB_MAGIC, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_calibration(path: str | PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CALIB_HEADER.size:
        raise ValueError(f"{path}: calibration file shorter than its 16-byte header")
    magic, rows, cols = _CALIB_HEADER.unpack_from(blob)
    if magic != CALIB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CALIB_MAGIC!r}")
    expected = rows * cols * 4
    if len(blob) - _CALIB_HEADER.size != expected:
        raise ValueError(
            f"{path}: header declares {rows}x{cols} floats ({expected} bytes) "
            f"but payload is {len(blob) - _CALIB_HEADER.size} bytes"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_CALIB_HEADER.size).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: calibration data contains non-finite values")
    return data.astype(np.float32)


def iter_batches(data: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    for start in range(0, data.shape[0], batch_size):
        yield data[start : start + batch_size]


def norms_to_dict(stats: dict[str, LayerActivationStats]) -> dict:
    return {
        name: {"rows_seen": st.rows_seen, "norms": [float(v) for v in st.norms]}
        for name, st in stats.items()
    }


def norms_from_dict(d: dict) -> dict[str, LayerActivationStats]:
    out = {}
    for name, entry in d.items():
        norms = np.asarray(entry["norms"], dtype=np.float64)
        if norms.ndim != 1 or not np.all(np.isfinite(norms)) or np.any(norms < 0):
            raise ValueError(f"norms for {name!r} must be a list of finite non-negative numbers")
        out[name] = LayerActivationStats(name, np.square(norms), int(entry.get("rows_seen", 0)))
    return out


def write_norms(stats: dict[str, LayerActivationStats], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(norms_to_dict(stats), fh, separators=(",", ":"))


def read_norms(path: str | PathLike) -> dict[str, LayerActivationStats]:
    with open(path, encoding="utf-8") as fh:
        return norms_from_dict(json.load(fh))
