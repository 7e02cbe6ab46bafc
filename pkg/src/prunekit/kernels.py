"""Weight scoring, deterministic bottom-k mask selection, and masking.

Scores are float64. A float32 weight times a float64 norm is computed
exactly for norms that are themselves float32-representable, so Wanda
scores carry no rounding beyond the inputs'.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .container import Tensor

PER_TENSOR = "per_tensor"
PER_ROW = "per_row"
GROUPS = (PER_TENSOR, PER_ROW)

MAGNITUDE = "magnitude"
WANDA = "wanda"
METHODS = (MAGNITUDE, WANDA)

DEFAULT_GROUP = {MAGNITUDE: PER_TENSOR, WANDA: PER_ROW}


def check_method(method: str) -> str:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return method


def check_group(group: str) -> str:
    if group not in GROUPS:
        raise ValueError(f"unknown comparison group {group!r}; expected one of {', '.join(GROUPS)}")
    return group


def check_sparsity(sparsity: float, what: str = "sparsity") -> float:
    s = float(sparsity)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"{what} must lie in [0, 1], got {sparsity!r}")
    return s


def prune_count(sparsity: float, n: int) -> int:
    """Entries to prune in a group of ``n``: round-half-up of ``sparsity * n``."""
    return int(math.floor(sparsity * n + 0.5))


def _as_array(W) -> np.ndarray:
    return W.data if isinstance(W, Tensor) else np.asarray(W)


def magnitude_scores(W) -> np.ndarray:
    return np.abs(_as_array(W)).astype(np.float64)


def _norm_vector(norms) -> np.ndarray:
    # accepts LayerActivationStats or any 1-D array-like
    vec = getattr(norms, "norms", norms)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"activation norms must be 1-D, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)) or np.any(vec < 0):
        raise ValueError("activation norms must be finite and non-negative")
    return vec


def wanda_scores(W, norms) -> np.ndarray:
    """``|W[i, j]| * norms[j]`` for a ``[outputs, inputs]`` weight."""
    w = _as_array(W)
    if w.ndim != 2:
        raise ValueError(f"wanda requires rank-2 weights, got rank {w.ndim}")
    vec = _norm_vector(norms)
    if vec.shape[0] != w.shape[1]:
        raise ValueError(
            f"activation norms have length {vec.shape[0]} but the weight has {w.shape[1]} input columns"
        )
    return np.abs(w).astype(np.float64) * vec[None, :]


@dataclass(frozen=True, eq=False)
class PruneMask:
    """``pruned`` is True where the weight is set to zero."""

    pruned: np.ndarray
    group: str = PER_TENSOR

    def __post_init__(self):
        arr = np.array(self.pruned, dtype=bool, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "pruned", arr)
        check_group(self.group)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pruned.shape

    def group_view(self) -> np.ndarray:
        return _grouped(self.pruned, self.group)

    def counts(self) -> list[int]:
        """Pruned entries per comparison group."""
        return [int(c) for c in self.group_view().sum(axis=1)]

    def popcount(self) -> int:
        return int(np.count_nonzero(self.pruned))

    def __eq__(self, other):
        if not isinstance(other, PruneMask):
            return NotImplemented
        return self.shape == other.shape and self.group == other.group and bool(
            np.array_equal(self.pruned, other.pruned)
        )


def _grouped(arr: np.ndarray, group: str) -> np.ndarray:
    if group == PER_TENSOR:
        return arr.reshape(1, -1)
    if arr.ndim < 1:
        raise ValueError("per_row grouping needs at least one dimension")
    return arr.reshape(arr.shape[0], -1)


def select_prune_mask(scores, sparsity: float, group: str = PER_TENSOR) -> PruneMask:
    """Mark the ``prune_count(sparsity, n)`` lowest scores of each group.

    Ties go to the lower flat index (stable sort), so the result does not
    depend on platform or thread count.
    """
    check_group(group)
    s = check_sparsity(sparsity)
    scores = np.asarray(scores)
    grouped = _grouped(scores, group)
    n = grouped.shape[1]
    k = prune_count(s, n)
    mask = np.zeros(grouped.shape, dtype=bool)
    if k > 0:
        order = np.argsort(grouped, axis=1, kind="stable")
        np.put_along_axis(mask, order[:, :k], True, axis=1)
    return PruneMask(mask.reshape(scores.shape), group)


def apply_mask(W: Tensor, mask: PruneMask) -> Tensor:
    if W.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match tensor {W.name!r} shape {W.shape}")
    return W.with_data(np.where(mask.pruned, np.float32(0.0), W.data))


def prune_layer(
    W: Tensor | np.ndarray,
    method: str,
    sparsity: float,
    norms=None,
    group: str | None = None,
) -> tuple[Tensor, PruneMask]:
    """Score, select and zero one weight. Bare arrays are wrapped as an unnamed tensor."""
    if not isinstance(W, Tensor):
        W = Tensor("<array>", np.asarray(W))
    check_method(method)
    group = check_group(group or DEFAULT_GROUP[method])
    if method == WANDA:
        if norms is None:
            raise ValueError(f"wanda requires activation norms for {W.name!r}")
        if W.ndim != 2:
            raise ValueError(f"wanda requires rank-2 weights ({W.name!r} has rank {W.ndim})")
        scores = wanda_scores(W, norms)
    else:
        scores = magnitude_scores(W)
    mask = select_prune_mask(scores, sparsity, group)
    return apply_mask(W, mask), mask


# -- mask export -------------------------------------------------------------


def rle_encode(flat: np.ndarray) -> list[list[int]]:
    """``[[start, length], ...]`` runs of True in a flat boolean array."""
    flat = np.asarray(flat, dtype=bool).ravel()
    padded = np.concatenate(([False], flat, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts, ends = edges[0::2], edges[1::2]
    return [[int(a), int(b - a)] for a, b in zip(starts, ends)]


def rle_decode(runs, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=bool)
    for start, length in runs:
        if start < 0 or length < 0 or start + length > size:
            raise ValueError(f"run [{start}, {length}] outside mask of {size} entries")
        out[start : start + length] = True
    return out


def masks_to_dict(masks: dict[str, PruneMask]) -> dict:
    return {
        name: {
            "group": m.group,
            "shape": list(m.shape),
            "k": m.counts(),
            "pruned_runs": rle_encode(m.pruned),
        }
        for name, m in masks.items()
    }


def masks_from_dict(d: dict) -> dict[str, PruneMask]:
    out = {}
    for name, entry in d.items():
        shape = tuple(entry["shape"])
        flat = rle_decode(entry["pruned_runs"], math.prod(shape))
        mask = PruneMask(flat.reshape(shape), entry["group"])
        if mask.counts() != list(entry["k"]):
            raise ValueError(f"mask for {name!r}: per-group counts do not match 'k'")
        out[name] = mask
    return out


def write_masks(masks: dict[str, PruneMask], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(masks_to_dict(masks), fh, separators=(",", ":"))


def read_masks(path: str | PathLike) -> dict[str, PruneMask]:
    with open(path, encoding="utf-8") as fh:
        return masks_from_dict(json.load(fh))
