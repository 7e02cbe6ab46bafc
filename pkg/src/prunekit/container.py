"""Single-file tensor container (safetensors layout), F32 only.

Layout: ``u64 LE header length N`` | ``N bytes of UTF-8 JSON`` | raw payload.
The JSON maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
(offsets relative to the start of the payload) and may carry a
``"__metadata__"`` string map.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterator, Mapping

import numpy as np

METADATA_KEY = "__metadata__"
DTYPE = "F32"
_ITEMSIZE = 4
_LE_F32 = np.dtype("<f4")


class ContainerError(ValueError):
    """Malformed or unsupported container content.

    ``tensor`` and ``offset`` locate the problem when known; ``offset`` is an
    absolute byte position in the file.
    """

    def __init__(self, message: str, tensor: str | None = None, offset: int | None = None):
        where = []
        if tensor is not None:
            where.append(f"tensor {tensor!r}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        full = f"{message} ({', '.join(where)})" if where else message
        super().__init__(full)
        self.tensor = tensor
        self.offset = offset


@dataclass(frozen=True, eq=False)
class Tensor:
    """A named, row-major float32 array. The backing array is read-only."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if arr.ndim == 0:
            raise ValueError(f"tensor {self.name!r}: shape must be non-empty")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor {self.name!r}: every dimension must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return DTYPE

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def to_bytes(self) -> bytes:
        return self.data.astype(_LE_F32, copy=False).tobytes(order="C")

    def with_data(self, data: np.ndarray) -> "Tensor":
        return Tensor(self.name, np.asarray(data).reshape(self.shape))

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        # bit-exact: distinguishes -0.0 from 0.0
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.to_bytes() == other.to_bytes()
        )

    def __hash__(self):
        return hash((self.name, self.shape))

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={list(self.shape)})"


@dataclass(eq=False)
class Checkpoint:
    """Ordered collection of uniquely named tensors plus a string metadata map."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_tensors(cls, tensors, metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        out: dict[str, Tensor] = {}
        for t in tensors:
            if t.name in out:
                raise ValueError(f"duplicate tensor name {t.name!r}")
            out[t.name] = t
        return cls(out, dict(metadata or {}))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], metadata=None) -> "Checkpoint":
        return cls.from_tensors((Tensor(k, v) for k, v in arrays.items()), metadata)

    def __post_init__(self):
        for key, t in self.tensors.items():
            if key != t.name:
                raise ValueError(f"tensor stored under {key!r} is named {t.name!r}")
            if key == METADATA_KEY:
                raise ValueError(f"{METADATA_KEY!r} is reserved")
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("metadata must map str to str")

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def replace(self, updated: Mapping[str, Tensor]) -> "Checkpoint":
        """Copy with some tensors swapped out; order and metadata are kept."""
        unknown = set(updated) - set(self.tensors)
        if unknown:
            raise KeyError(f"unknown tensors: {sorted(unknown)}")
        return Checkpoint(
            {name: updated.get(name, t) for name, t in self.tensors.items()},
            dict(self.metadata),
        )

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            list(self.tensors) == list(other.tensors)
            and all(a == b for a, b in zip(self.tensors.values(), other.tensors.values()))
            and self.metadata == other.metadata
        )


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    if ckpt.metadata:
        header[METADATA_KEY] = dict(ckpt.metadata)
    payloads = []
    pos = 0
    for t in ckpt.tensors.values():
        raw = t.to_bytes()
        header[t.name] = {"dtype": DTYPE, "shape": list(t.shape), "data_offsets": [pos, pos + len(raw)]}
        payloads.append(raw)
        pos += len(raw)
    head = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(payloads)


def write_checkpoint(ckpt: Checkpoint, path: str | PathLike) -> bytes:
    """Write ``ckpt`` to ``path``; returns the exact bytes written."""
    blob = serialize_checkpoint(ckpt)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _unique_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ContainerError("duplicate key in header", tensor=k, offset=8)
        out[k] = v
    return out


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 8:
        raise ContainerError(f"file too short for header length ({len(blob)} bytes)", offset=0)
    (n,) = struct.unpack_from("<Q", blob, 0)
    if 8 + n > len(blob):
        raise ContainerError(f"header length {n} exceeds file size {len(blob)}", offset=0)
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"), object_pairs_hook=_unique_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header is not valid UTF-8 JSON: {exc}", offset=8) from None
    if not isinstance(header, dict):
        raise ContainerError("header must be a JSON object", offset=8)

    base = 8 + n
    payload_len = len(blob) - base
    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ContainerError("__metadata__ must be a string-to-string map", offset=8)

    spans = []
    for name, info in header.items():
        if not isinstance(info, dict):
            raise ContainerError("tensor entry must be an object", tensor=name, offset=8)
        dtype = info.get("dtype")
        shape = info.get("shape")
        offsets = info.get("data_offsets")
        if dtype != DTYPE:
            raise ContainerError(f"unsupported dtype {dtype!r}, only {DTYPE} is accepted", tensor=name, offset=8)
        if not isinstance(shape, list) or not shape or not all(_is_int(d) and d >= 1 for d in shape):
            raise ContainerError(f"invalid shape {shape!r}", tensor=name, offset=8)
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(_is_int(o) for o in offsets)
            or not 0 <= offsets[0] <= offsets[1]
        ):
            raise ContainerError(f"invalid data_offsets {offsets!r}", tensor=name, offset=8)
        begin, end = offsets
        expected = math.prod(shape) * _ITEMSIZE
        if end - begin != expected:
            raise ContainerError(
                f"payload is {end - begin} bytes ({(end - begin) / _ITEMSIZE:g} floats) "
                f"but shape {shape} needs {expected}",
                tensor=name,
                offset=base + begin,
            )
        if end > payload_len:
            raise ContainerError(
                f"data_offsets end {end} beyond payload of {payload_len} bytes", tensor=name, offset=base + begin
            )
        spans.append((begin, end, name))

    pos = 0
    for begin, end, name in sorted(spans):
        if begin < pos:
            raise ContainerError("payload overlaps previous tensor", tensor=name, offset=base + begin)
        if begin > pos:
            raise ContainerError(f"gap of {begin - pos} bytes before tensor", tensor=name, offset=base + pos)
        pos = end
    if pos != payload_len:
        raise ContainerError(f"{payload_len - pos} trailing bytes after last tensor", offset=base + pos)

    tensors = {}
    for name, info in header.items():
        begin, end = info["data_offsets"]
        arr = np.frombuffer(blob, dtype=_LE_F32, count=(end - begin) // _ITEMSIZE, offset=base + begin)
        finite = np.isfinite(arr)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise ContainerError(
                f"non-finite value {arr[bad]!r} at element {bad}", tensor=name, offset=base + begin + bad * _ITEMSIZE
            )
        tensors[name] = Tensor(name, arr.reshape(info["shape"]))
    return Checkpoint(tensors, dict(metadata))


def read_checkpoint(path: str | PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


@dataclass(frozen=True)
class TensorStats:
    count: int
    zeros: int

    @property
    def sparsity(self) -> float:
        return self.zeros / self.count if self.count else 0.0


def tensor_stats(t: Tensor | np.ndarray) -> TensorStats:
    """Exact count of entries equal to 0.0 (either sign)."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return TensorStats(int(data.size), int(np.count_nonzero(data == 0)))
