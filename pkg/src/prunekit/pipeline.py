"""Checkpoint-level pruning and the reports built around it."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from os import PathLike

from . import __version__
from .container import Checkpoint, Tensor, serialize_checkpoint, tensor_stats
from .kernels import DEFAULT_GROUP, WANDA, PruneMask, check_group, check_method, check_sparsity, prune_layer
from .manifest import (
    COMPONENTS,
    EXCLUDED,
    IMAGE_GENERATOR,
    TEXT_ENCODER,
    Manifest,
    classify_tensors,
    component_profiles,
    prunable_set,
)
from .owl import DEFAULT_LAMBDA, DEFAULT_M, OwlConfig, owl_prune_component


def sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


@dataclass
class TensorReport:
    name: str
    component: str
    method: str
    group: str
    target_sparsity: float
    count: int
    newly_zeroed: int
    achieved_sparsity: float


@dataclass
class ComponentReport:
    target: float
    total_params: int
    prunable_params: int
    zeros_prunable: int
    zeros_total: int
    achieved_over_prunable: float
    achieved_over_total: float


@dataclass
class PruneReport:
    tool_version: str
    tensors: list[TensorReport] = field(default_factory=list)
    components: dict[str, ComponentReport] = field(default_factory=dict)
    global_achieved: float = 0.0
    owl_plans: dict[str, list[dict]] = field(default_factory=dict)
    input_digest: str | None = None
    output_digest: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneReport":
        return cls(
            tool_version=d["tool_version"],
            tensors=[TensorReport(**t) for t in d.get("tensors", [])],
            components={k: ComponentReport(**v) for k, v in d.get("components", {}).items()},
            global_achieved=d.get("global_achieved", 0.0),
            owl_plans={k: list(v) for k, v in d.get("owl_plans", {}).items()},
            input_digest=d.get("input_digest"),
            output_digest=d.get("output_digest"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PruneReport":
        return cls.from_dict(json.loads(text))


@dataclass
class PruneResult:
    checkpoint: Checkpoint
    report: PruneReport
    masks: dict[str, PruneMask]


@dataclass(frozen=True)
class OwlSettings:
    lam: float = DEFAULT_LAMBDA
    outlier_multiplier: float = DEFAULT_M
    components: tuple[str, ...] = (TEXT_ENCODER,)


def _norm_for(norms, name):
    if norms is None:
        return None
    return norms.get(name)


def _validate(ckpt, plan_by_component, methods, groups, norms, owl):
    for comp, (names, sparsity) in plan_by_component.items():
        method = methods[comp]
        use_owl = owl is not None and comp in owl.components
        if sparsity == 0.0 and not use_owl:
            continue
        for name in names:
            t = ckpt[name]
            if method == WANDA and t.ndim != 2:
                raise ValueError(f"wanda requires rank-2 weights: {name!r} has shape {list(t.shape)}")
            if use_owl and t.ndim != 2:
                raise ValueError(f"OWL requires rank-2 weights: {name!r} has shape {list(t.shape)}")
            if method == WANDA or use_owl:
                n = _norm_for(norms, name)
                if n is None:
                    raise ValueError(f"no activation norms for tensor {name!r}")
                if len(n.norms) != t.shape[1]:
                    raise ValueError(
                        f"activation norms for {name!r} have length {len(n.norms)}, weight has {t.shape[1]} columns"
                    )


def prune_checkpoint(
    ckpt: Checkpoint,
    manifest: Manifest,
    sparsities: dict[str, float],
    methods: dict[str, str] | None = None,
    norms: dict | None = None,
    groups: dict[str, str] | None = None,
    owl: OwlSettings | None = None,
    threads: int = 1,
) -> PruneResult:
    """Prune each component's prunable tensors at its target sparsity.

    ``sparsities`` and ``methods`` are keyed by component; unspecified
    components are left alone and default to magnitude. Output is identical
    for any ``threads``.
    """
    methods = dict(methods or {})
    groups = dict(groups or {})
    assignment = classify_tensors(ckpt, manifest)
    plan_by_component = {}
    for comp, s in sparsities.items():
        if comp not in (TEXT_ENCODER, IMAGE_GENERATOR):
            raise ValueError(f"cannot prune component {comp!r}")
        check_sparsity(s, f"{comp} sparsity")
        methods.setdefault(comp, "magnitude")
        check_method(methods[comp])
        if groups.get(comp) is not None:
            check_group(groups[comp])
        plan_by_component[comp] = (prunable_set(ckpt, manifest, comp, assignment), float(s))
    _validate(ckpt, plan_by_component, methods, groups, norms, owl)

    updated: dict[str, Tensor] = {}
    masks: dict[str, PruneMask] = {}
    per_tensor_meta = {}
    owl_plans = {}

    jobs = []
    for comp, (names, s) in plan_by_component.items():
        method = methods[comp]
        group = groups.get(comp) or DEFAULT_GROUP[method]
        if owl is not None and comp in owl.components:
            cfg = OwlConfig(s, min(owl.lam, s, 1.0 - s), owl.outlier_multiplier)
            pruned, m, plan = owl_prune_component(
                {n: ckpt[n] for n in names}, {n: norms[n] for n in names}, method, cfg, group
            )
            updated.update(pruned)
            masks.update(m)
            owl_plans[comp] = plan.to_list()
            for e in plan.entries:
                per_tensor_meta[e.layer] = (comp, method, group, e.assigned_sparsity)
            continue
        if s == 0.0:
            for n in names:
                per_tensor_meta[n] = (comp, method, group, 0.0)
            continue
        for n in names:
            per_tensor_meta[n] = (comp, method, group, s)
            jobs.append((n, method, s, _norm_for(norms, n) if method == WANDA else None, group))

    def run(job):
        name, method, s, layer_norms, group = job
        return prune_layer(ckpt[name], method, s, layer_norms, group)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for job, (t, m) in zip(jobs, results):
        updated[job[0]] = t
        masks[job[0]] = m

    out = ckpt.replace(updated)
    masks = {n: masks[n] for n in ckpt.names() if n in masks}
    report = build_report(ckpt, out, assignment, manifest, sparsities, per_tensor_meta)
    report.owl_plans = owl_plans
    return PruneResult(out, report, masks)


def build_report(dense, pruned, assignment, manifest, sparsities, per_tensor_meta) -> PruneReport:
    report = PruneReport(tool_version=__version__)
    for name, (comp, method, group, target) in per_tensor_meta.items():
        before = tensor_stats(dense[name])
        after = tensor_stats(pruned[name])
        report.tensors.append(
            TensorReport(name, comp, method, group, target, after.count, after.zeros - before.zeros, after.sparsity)
        )
    order = {n: i for i, n in enumerate(dense.names())}
    report.tensors.sort(key=lambda r: order[r.name])

    for prof in component_profiles(pruned, assignment, manifest.prunable):
        if prof.component == EXCLUDED and not prof.total_params:
            continue
        prunable = set(prunable_set(pruned, manifest, prof.component, assignment))
        zeros_total = zeros_prunable = 0
        for n in prof.tensor_names:
            z = tensor_stats(pruned[n]).zeros
            zeros_total += z
            if n in prunable:
                zeros_prunable += z
        report.components[prof.component] = ComponentReport(
            target=float(sparsities.get(prof.component, 0.0)),
            total_params=prof.total_params,
            prunable_params=prof.prunable_params,
            zeros_prunable=zeros_prunable,
            zeros_total=zeros_total,
            achieved_over_prunable=zeros_prunable / prof.prunable_params if prof.prunable_params else 0.0,
            achieved_over_total=zeros_total / prof.total_params if prof.total_params else 0.0,
        )
    total = pruned.num_params()
    zeros = sum(tensor_stats(t).zeros for t in pruned)
    report.global_achieved = zeros / total if total else 0.0
    return report


def compare_checkpoints(dense: Checkpoint, pruned: Checkpoint, assignment: dict | None = None) -> dict:
    """Per-tensor and per-component zero counts of ``pruned`` relative to ``dense``."""
    if dense.names() != pruned.names():
        raise ValueError("dense and pruned checkpoints hold different tensors")
    rows = []
    by_comp: dict[str, list[int]] = {}
    total_count = total_added = total_zeros = 0
    for d, p in zip(dense, pruned):
        if d.shape != p.shape:
            raise ValueError(f"tensor {d.name!r} changed shape: {d.shape} -> {p.shape}")
        sd, sp = tensor_stats(d), tensor_stats(p)
        comp = assignment.get(d.name, EXCLUDED) if assignment else None
        added = sp.zeros - sd.zeros
        rows.append(
            {
                "name": d.name,
                "component": comp,
                "count": sp.count,
                "zeros_dense": sd.zeros,
                "zeros_pruned": sp.zeros,
                "added_sparsity": added / sp.count,
                "achieved_sparsity": sp.sparsity,
            }
        )
        total_count += sp.count
        total_added += added
        total_zeros += sp.zeros
        if comp is not None:
            acc = by_comp.setdefault(comp, [0, 0, 0])
            acc[0] += sp.count
            acc[1] += added
            acc[2] += sp.zeros
    out = {
        "tensors": rows,
        "global_added_sparsity": total_added / total_count if total_count else 0.0,
        "global_achieved_sparsity": total_zeros / total_count if total_count else 0.0,
    }
    if assignment is not None:
        out["components"] = {
            c: {"count": n, "added_sparsity": a / n, "achieved_sparsity": z / n}
            for c, (n, a, z) in ((c, by_comp[c]) for c in COMPONENTS if c in by_comp)
        }
    return out


def checkpoint_digest(ckpt: Checkpoint) -> str:
    return sha256(serialize_checkpoint(ckpt))


def format_table(headers: list[str], rows: list[list]) -> str:
    """Left-aligned first column, right-aligned others, two-space gutters."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]

    def line(r):
        parts = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), rule] + [line(r) for r in cells[1:]])


def write_json(obj, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")

