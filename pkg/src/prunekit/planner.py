"""Full-model sparsity budgets split between the text encoder and image generator.

Two strategies:

* ratio split: a target total sparsity is turned into a number of pruned
  weights, and ``ratio_text`` of them are taken from the text encoder;
* threshold sweep: start both components at their quality drop-off
  sparsities and step both down together.

All arithmetic uses full component parameter counts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

from .kernels import MAGNITUDE, WANDA

# Stable Diffusion 2 component sizes as usually quoted (CLIP text encoder / U-Net).
SD2_TEXT_PARAMS = 340_000_000
SD2_IMAGE_PARAMS = 860_000_000

# Exact counts of the SD2 text encoder (23-layer OpenCLIP ViT-H/14 text tower)
# and U-Net. See ``clip_text_encoder_params`` for the former.
SD2_TEXT_PARAMS_EXACT = 340_387_840
SD2_IMAGE_PARAMS_EXACT = 865_910_724

# Component sparsity beyond which generation quality collapses.
DROP_OFF_THRESHOLDS = {
    MAGNITUDE: {"text": 0.625, "image": 0.50},
    WANDA: {"text": 0.60, "image": 0.50},
}
RECOMMENDED_CONFIG = {"text": 0.475, "image": 0.35}
SWEEP_STEP = 0.025
SWEEP_COUNT = 9


def clip_text_encoder_params(
    vocab: int = 49408,
    positions: int = 77,
    width: int = 1024,
    layers: int = 23,
    mlp_ratio: int = 4,
) -> int:
    """Parameter count of a CLIP text transformer (biased q/k/v/out, two LayerNorms per block)."""
    hidden = mlp_ratio * width
    attn = 4 * (width * width + width)
    mlp = (width * hidden + hidden) + (hidden * width + width)
    norms = 2 * (2 * width)
    embeddings = vocab * width + positions * width
    return embeddings + layers * (attn + mlp + norms) + 2 * width


@dataclass(frozen=True)
class SparsityPlan:
    total_sparsity: float
    ratio_text: float
    ratio_image: float
    n_text: int
    n_image: int
    s_text: float
    s_image: float
    feasible: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def realized_total(self) -> float:
        return total_sparsity(self.s_text, self.s_image, self.n_text, self.n_image)


def _check_fraction(x: float, what: str) -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{what} must lie in [0, 1], got {x!r}")
    return x


def _check_count(n, what: str) -> int:
    if n != int(n) or int(n) <= 0:
        raise ValueError(f"{what} must be a positive integer count, got {n!r}")
    return int(n)


def parse_ratio(text: str) -> float:
    """``"75:25"`` -> 0.75 (the text encoder's share)."""
    try:
        t, i = (float(p) for p in text.split(":"))
    except ValueError:
        raise ValueError(f"ratio must look like T:I (e.g. 75:25), got {text!r}") from None
    if t < 0 or i < 0 or t + i <= 0:
        raise ValueError(f"ratio parts must be non-negative and not both zero, got {text!r}")
    return t / (t + i)


def allocate_by_ratio(
    total: float,
    ratio_text: float,
    n_text: int = SD2_TEXT_PARAMS,
    n_image: int = SD2_IMAGE_PARAMS,
) -> SparsityPlan:
    """Split ``total`` so the text encoder contributes ``ratio_text`` of the pruned weights.

    Infeasible splits (a component above 100%) are returned with
    ``feasible=False`` and the out-of-range values intact.
    """
    total = _check_fraction(total, "total sparsity")
    ratio_text = _check_fraction(ratio_text, "text ratio")
    n_text = _check_count(n_text, "n_text")
    n_image = _check_count(n_image, "n_image")
    pruned = total * (n_text + n_image)
    s_text = ratio_text * pruned / n_text
    s_image = (1.0 - ratio_text) * pruned / n_image
    feasible = s_text <= 1.0 and s_image <= 1.0
    return SparsityPlan(total, ratio_text, 1.0 - ratio_text, n_text, n_image, s_text, s_image, feasible)


def total_sparsity(
    s_text: float,
    s_image: float,
    n_text: int = SD2_TEXT_PARAMS,
    n_image: int = SD2_IMAGE_PARAMS,
) -> float:
    return (s_text * n_text + s_image * n_image) / (n_text + n_image)


@dataclass(frozen=True)
class SweepRow:
    s_text: float
    s_image: float
    total: float
    clamped: bool = False


@dataclass(frozen=True)
class SweepConfig:
    text_threshold: float
    image_threshold: float
    step: float
    count: int
    rows: tuple[SweepRow, ...]

    def totals(self) -> list[float]:
        return [r.total for r in self.rows]

    def to_dict(self) -> dict:
        return asdict(self)


def threshold_sweep(
    thr_text: float,
    thr_image: float,
    step: float = SWEEP_STEP,
    count: int = SWEEP_COUNT,
    n_text: int = SD2_TEXT_PARAMS,
    n_image: int = SD2_IMAGE_PARAMS,
) -> SweepConfig:
    thr_text = _check_fraction(thr_text, "text threshold")
    thr_image = _check_fraction(thr_image, "image threshold")
    if not step > 0:
        raise ValueError(f"step must be positive, got {step!r}")
    if count != int(count) or int(count) < 1:
        raise ValueError(f"count must be a positive integer, got {count!r}")
    count = int(count)
    rows = []
    for i in range(count):
        st, si = thr_text - i * step, thr_image - i * step
        clamped = st < 0 or si < 0
        st, si = max(st, 0.0), max(si, 0.0)
        rows.append(SweepRow(st, si, total_sparsity(st, si, n_text, n_image), clamped))
    return SweepConfig(thr_text, thr_image, float(step), count, tuple(rows))


def default_thresholds(method: str) -> dict[str, float]:
    if method not in DROP_OFF_THRESHOLDS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(DROP_OFF_THRESHOLDS)}")
    return dict(DROP_OFF_THRESHOLDS[method])


def feasibility_limit(total: float, n_text: int = SD2_TEXT_PARAMS, n_image: int = SD2_IMAGE_PARAMS) -> tuple[float, float]:
    """Range of ``ratio_text`` for which ``allocate_by_ratio(total, ...)`` is feasible."""
    total = _check_fraction(total, "total sparsity")
    if total == 0.0:
        return 0.0, 1.0
    n = n_text + n_image
    hi = min(1.0, n_text / (total * n))
    lo = max(0.0, 1.0 - n_image / (total * n))
    return lo, hi


def pct(x: float) -> str:
    """One-decimal percentage with half-up rounding (``0.385416`` -> ``"38.5%"``)."""
    if not math.isfinite(x):
        return "N/A"
    return f"{Decimal(repr(x * 100)).quantize(Decimal('0.1'), rounding=ROUND_HALF_UP)}%"
