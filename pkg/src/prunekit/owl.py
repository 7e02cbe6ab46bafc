"""Outlier-weighted layerwise sparsity (OWL).

Each layer's outlier ratio is the fraction of activation-scaled weights
``|W[i, j]| * norms[j]`` above ``M`` times the layer mean. Sparsity is then
shifted away from outlier-rich layers:

    S_l = S + lam * (mean(D) - D_l) / max_l |D_l - mean(D)|

which keeps the unweighted mean at ``S`` and puts the most extreme layer
exactly ``lam`` away from it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .container import Tensor
from .kernels import (
    DEFAULT_GROUP,
    WANDA,
    PruneMask,
    apply_mask,
    check_group,
    check_method,
    magnitude_scores,
    select_prune_mask,
    wanda_scores,
)

DEFAULT_LAMBDA = 0.08
DEFAULT_M = 5.0


@dataclass(frozen=True)
class OwlConfig:
    target_sparsity: float
    lam: float = DEFAULT_LAMBDA
    outlier_multiplier: float = DEFAULT_M

    def __post_init__(self):
        s, lam, m = self.target_sparsity, self.lam, self.outlier_multiplier
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"OWL target sparsity must lie in [0, 1], got {s}")
        if not 0.0 <= lam <= min(s, 1.0 - s) + 1e-12:
            raise ValueError(f"OWL lambda must lie in [0, min(S, 1-S)] = [0, {min(s, 1 - s):g}], got {lam}")
        if not m > 1.0:
            raise ValueError(f"OWL outlier multiplier M must be > 1, got {m}")

    def with_target(self, target_sparsity: float) -> "OwlConfig":
        """Same knobs at a new target; lambda is shrunk to stay within bounds."""
        lam = min(self.lam, target_sparsity, 1.0 - target_sparsity)
        return OwlConfig(target_sparsity, lam, self.outlier_multiplier)


@dataclass(frozen=True)
class LayerSparsity:
    layer: str
    outlier_ratio: float
    assigned_sparsity: float


@dataclass(frozen=True)
class LayerSparsityPlan:
    entries: tuple[LayerSparsity, ...]
    target_sparsity: float
    lam: float

    def sparsities(self) -> dict[str, float]:
        return {e.layer: e.assigned_sparsity for e in self.entries}

    def mean_sparsity(self) -> float:
        return float(np.mean([e.assigned_sparsity for e in self.entries]))

    def to_list(self) -> list[dict]:
        return [
            {"layer": e.layer, "outlier_ratio": e.outlier_ratio, "assigned_sparsity": e.assigned_sparsity}
            for e in self.entries
        ]

    @classmethod
    def from_list(cls, rows: list[dict], target_sparsity: float | None = None, lam: float = 0.0):
        entries = tuple(LayerSparsity(r["layer"], float(r["outlier_ratio"]), float(r["assigned_sparsity"])) for r in rows)
        if target_sparsity is None:
            target_sparsity = float(np.mean([e.assigned_sparsity for e in entries])) if entries else 0.0
        return cls(entries, target_sparsity, lam)


def layer_outlier_ratio(W, norms, outlier_multiplier: float = DEFAULT_M) -> float:
    if not outlier_multiplier > 1.0:
        raise ValueError(f"outlier multiplier must be > 1, got {outlier_multiplier}")
    a = wanda_scores(W, norms)
    mean = a.mean()
    if mean == 0.0:
        return 0.0
    return int(np.count_nonzero(a > outlier_multiplier * mean)) / a.size


def allocate_layer_sparsities(outlier_ratios, cfg: OwlConfig, names=None) -> LayerSparsityPlan:
    d = np.asarray(outlier_ratios, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("OWL allocation needs a non-empty list of layer outlier ratios")
    if names is None:
        names = [str(i) for i in range(d.size)]
    names = list(names)
    if len(names) != d.size:
        raise ValueError("one layer name per outlier ratio is required")
    s = cfg.target_sparsity
    if np.ptp(d) == 0.0 or cfg.lam == 0.0:
        alloc = np.full(d.size, s)
    else:
        dev = d.mean() - d
        dev -= dev.mean()  # second pass absorbs rounding in the first mean
        alloc = s + cfg.lam * dev / np.max(np.abs(dev))
    # lam <= min(S, 1-S) keeps alloc in range; clip only absorbs rounding
    alloc = np.clip(alloc, 0.0, 1.0)
    entries = tuple(LayerSparsity(n, float(r), float(a)) for n, r, a in zip(names, d, alloc))
    return LayerSparsityPlan(entries, s, cfg.lam)


def owl_prune_component(
    tensors: dict[str, Tensor],
    norms: dict,
    method: str,
    cfg: OwlConfig,
    group: str | None = None,
) -> tuple[dict[str, Tensor], dict[str, PruneMask], LayerSparsityPlan]:
    """Prune each layer of a component at its OWL-assigned sparsity.

    ``norms`` maps layer name to activation norms; they are needed for the
    outlier scan whatever ``method`` is. With magnitude, selection inside a
    layer still uses plain ``|W|``.
    """
    check_method(method)
    group = check_group(group or DEFAULT_GROUP[method])
    names = list(tensors)
    if not names:
        return {}, {}, LayerSparsityPlan((), cfg.target_sparsity, cfg.lam)
    missing = [n for n in names if n not in norms or norms[n] is None]
    if missing:
        raise ValueError(f"OWL requires activation norms for every layer; missing: {', '.join(missing)}")
    for n in names:
        if tensors[n].ndim != 2:
            raise ValueError(f"OWL requires rank-2 weights ({n!r} has rank {tensors[n].ndim})")

    ratios = [layer_outlier_ratio(tensors[n], norms[n], cfg.outlier_multiplier) for n in names]
    plan = allocate_layer_sparsities(ratios, cfg, names)

    pruned, masks = {}, {}
    for entry in plan.entries:
        W = tensors[entry.layer]
        scores = wanda_scores(W, norms[entry.layer]) if method == WANDA else magnitude_scores(W)
        mask = select_prune_mask(scores, entry.assigned_sparsity, group)
        pruned[entry.layer] = apply_mask(W, mask)
        masks[entry.layer] = mask
    return pruned, masks, plan


def write_plan(plan: LayerSparsityPlan, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_list(), fh, indent=2)
        fh.write("\n")

