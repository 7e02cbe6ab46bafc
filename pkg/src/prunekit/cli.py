"""``prunekit`` command line.

Exit codes: 0 success, 1 I/O failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .calibration import (
    accumulate_norms,
    iter_batches,
    load_model_spec,
    output_divergence,
    read_calibration,
    read_norms,
    write_norms,
)
from .container import ContainerError, parse_checkpoint, serialize_checkpoint, tensor_stats
from .kernels import GROUPS, METHODS, write_masks
from .manifest import IMAGE_GENERATOR, TEXT_ENCODER, classify_tensors, component_profiles, load_manifest
from .owl import DEFAULT_LAMBDA, DEFAULT_M
from .pipeline import OwlSettings, compare_checkpoints, format_table, prune_checkpoint, sha256, write_json
from .planner import (
    SD2_IMAGE_PARAMS,
    SD2_TEXT_PARAMS,
    SWEEP_COUNT,
    SWEEP_STEP,
    allocate_by_ratio,
    default_thresholds,
    parse_ratio,
    pct,
    threshold_sweep,
)

EXIT_OK, EXIT_IO, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _load_ckpt(path):
    blob = _read_bytes(path)
    return parse_checkpoint(blob), blob


def _fraction(text: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= x <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return x


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return n


def _default_threads() -> int:
    env = os.environ.get("PRUNEKIT_THREADS")
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _emit_json(args, obj) -> None:
    if getattr(args, "json", None):
        write_json(obj, args.json)


# -- commands --------------------------------------------------------------------


def cmd_inspect(args) -> int:
    ckpt, blob = _load_ckpt(args.checkpoint)
    assignment = None
    if args.manifest:
        manifest = load_manifest(args.manifest)
        assignment = classify_tensors(ckpt, manifest)
        for w in assignment.warnings:
            print(f"warning: {w}", file=sys.stderr)
    rows, tensors = [], []
    for t in ckpt:
        st = tensor_stats(t)
        comp = assignment[t.name] if assignment else "-"
        rows.append([t.name, "x".join(map(str, t.shape)), comp, st.count, st.zeros, pct(st.sparsity)])
        tensors.append(
            {"name": t.name, "shape": list(t.shape), "component": comp, "count": st.count,
             "zeros": st.zeros, "sparsity": st.sparsity}
        )
    print(format_table(["tensor", "shape", "component", "params", "zeros", "sparsity"], rows))
    out = {"sha256": sha256(blob), "tensors": tensors, "total_params": ckpt.num_params()}
    if assignment is not None:
        profiles = component_profiles(ckpt, assignment, manifest.prunable)
        print()
        print(format_table(
            ["component", "total_params", "prunable_params", "tensors"],
            [[p.component, p.total_params, p.prunable_params, len(p.tensor_names)] for p in profiles],
        ))
        out["components"] = [
            {"component": p.component, "total_params": p.total_params, "prunable_params": p.prunable_params,
             "tensors": list(p.tensor_names)}
            for p in profiles
        ]
    _emit_json(args, out)
    return EXIT_OK


def _plan_row(plan):
    status = "ok" if plan.feasible else "infeasible"
    ratio = f"{plan.ratio_text * 100:g}:{plan.ratio_image * 100:g}"
    return [pct(plan.total_sparsity), ratio, pct(plan.s_text), pct(plan.s_image), status]


def cmd_plan(args) -> int:
    ratio_text = parse_ratio(args.ratio)
    plan = allocate_by_ratio(args.total, ratio_text, args.n_text, args.n_image)
    print(format_table(["total", "text:image", "text", "image", "status"], [_plan_row(plan)]))
    _emit_json(args, plan.to_dict())
    return EXIT_OK


def cmd_sweep(args) -> int:
    thr = default_thresholds(args.method)
    text = args.text_threshold if args.text_threshold is not None else thr["text"]
    image = args.image_threshold if args.image_threshold is not None else thr["image"]
    sweep = threshold_sweep(text, image, args.step, args.count, args.n_text, args.n_image)
    rows = [[pct(r.total), pct(r.s_text), pct(r.s_image), "clamped" if r.clamped else ""] for r in sweep.rows]
    print(format_table(["total", "text", "image", "note"], rows))
    _emit_json(args, sweep.to_dict())
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ckpt, _ = _load_ckpt(args.checkpoint)
    spec = load_model_spec(args.spec)
    data = read_calibration(args.data)
    stats = accumulate_norms(
        spec, ckpt, iter_batches(data, args.batch_size), threads=args.threads, deterministic=args.deterministic
    )
    write_norms(stats, args.out)
    rows = [[name, st.rows_seen, len(st.sq_sum), f"{float(st.norms.max()):.4g}"] for name, st in stats.items()]
    print(format_table(["layer", "rows", "features", "max_norm"], rows))
    return EXIT_OK


def cmd_prune(args) -> int:
    needs_norms = args.method == "wanda" or args.image_method == "wanda" or args.owl
    if needs_norms and not args.norms:
        if args.owl:
            raise UsageError("--owl requires --norms")
        raise UsageError("wanda requires --norms")
    if args.total is not None or args.ratio is not None:
        if args.total is None or args.ratio is None:
            raise UsageError("--total and --ratio must be given together")
        if args.text_sparsity is not None or args.image_sparsity is not None:
            raise UsageError("use either --total/--ratio or --text-sparsity/--image-sparsity")

    ckpt, blob_in = _load_ckpt(args.checkpoint)
    manifest = load_manifest(args.manifest)
    norms = read_norms(args.norms) if args.norms else None

    if args.total is not None:
        profiles = {p.component: p for p in component_profiles(ckpt, classify_tensors(ckpt, manifest), manifest.prunable)}
        plan = allocate_by_ratio(
            args.total, parse_ratio(args.ratio),
            profiles[TEXT_ENCODER].total_params, profiles[IMAGE_GENERATOR].total_params,
        )
        if not plan.feasible:
            raise UsageError(
                f"--total {args.total} with --ratio {args.ratio} is infeasible "
                f"(text {pct(plan.s_text)}, image {pct(plan.s_image)})"
            )
        text_s, image_s = plan.s_text, plan.s_image
    else:
        text_s = args.text_sparsity or 0.0
        image_s = args.image_sparsity or 0.0

    owl = None
    if args.owl:
        comps = (TEXT_ENCODER, IMAGE_GENERATOR) if args.owl_scope == "all" else (TEXT_ENCODER,)
        owl = OwlSettings(args.owl_lambda, args.owl_m, comps)
    groups = {TEXT_ENCODER: args.group, IMAGE_GENERATOR: args.group} if args.group else None
    result = prune_checkpoint(
        ckpt,
        manifest,
        {TEXT_ENCODER: text_s, IMAGE_GENERATOR: image_s},
        methods={TEXT_ENCODER: args.method, IMAGE_GENERATOR: args.image_method},
        norms=norms,
        groups=groups,
        owl=owl,
        threads=args.threads,
    )
    blob_out = serialize_checkpoint(result.checkpoint)
    with open(args.out, "wb") as fh:
        fh.write(blob_out)
    report = result.report
    report.input_digest = sha256(blob_in)
    report.output_digest = sha256(blob_out)
    if args.json:
        write_json(report.to_dict(), args.json)
    if args.masks:
        write_masks(result.masks, args.masks)

    rows = []
    for comp, c in report.components.items():
        rows.append([comp, pct(c.target), pct(c.achieved_over_prunable), pct(c.achieved_over_total),
                     c.prunable_params, c.total_params])
    print(format_table(["component", "target", "achieved/prunable", "achieved/total", "prunable", "total"], rows))
    print(f"global achieved sparsity: {pct(report.global_achieved)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = load_model_spec(args.spec)
    dense, _ = _load_ckpt(args.dense)
    pruned, _ = _load_ckpt(args.pruned)
    data = read_calibration(args.data)
    div = output_divergence(spec, dense, pruned, data)
    print(format_table(["metric", "value"], [[k, f"{v:.6g}"] for k, v in div.items()]))
    _emit_json(args, div)
    return EXIT_OK


def cmd_report(args) -> int:
    dense, _ = _load_ckpt(args.dense)
    pruned, _ = _load_ckpt(args.pruned)
    assignment = classify_tensors(dense, load_manifest(args.manifest)) if args.manifest else None
    cmp = compare_checkpoints(dense, pruned, assignment)
    rows = [[r["name"], r["count"], r["zeros_dense"], r["zeros_pruned"], pct(r["added_sparsity"]),
             pct(r["achieved_sparsity"])] for r in cmp["tensors"]]
    print(format_table(["tensor", "params", "zeros_dense", "zeros_pruned", "added", "achieved"], rows))
    for comp, c in cmp.get("components", {}).items():
        print(f"{comp}: added {pct(c['added_sparsity'])}, achieved {pct(c['achieved_sparsity'])}")
    print(f"global added sparsity: {pct(cmp['global_added_sparsity'])}")
    print(f"global achieved sparsity: {pct(cmp['global_achieved_sparsity'])}")
    _emit_json(args, cmp)
    return EXIT_OK


def cmd_fixture(args) -> int:
    from .fixtures import make_toy_fixture

    paths = make_toy_fixture(args.seed).save(args.out_dir)
    for kind, p in paths.items():
        print(f"{kind}: {p}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _add_counts(p):
    p.add_argument("--n-text", type=_positive_int, default=SD2_TEXT_PARAMS, help="text encoder parameter count")
    p.add_argument("--n-image", type=_positive_int, default=SD2_IMAGE_PARAMS, help="image generator parameter count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunekit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"prunekit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="list tensors, sparsity and component sizes")
    p.add_argument("checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--json")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("plan", help="split a total sparsity between components by ratio")
    p.add_argument("--total", type=_fraction, required=True)
    p.add_argument("--ratio", required=True, help="text:image share of pruned weights, e.g. 75:25")
    _add_counts(p)
    p.add_argument("--json")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sweep", help="step both component sparsities down from their drop-off thresholds")
    p.add_argument("--method", choices=METHODS, default="magnitude", help="selects default thresholds")
    p.add_argument("--text-threshold", type=_fraction)
    p.add_argument("--image-threshold", type=_fraction)
    p.add_argument("--step", type=float, default=SWEEP_STEP)
    p.add_argument("--count", type=int, default=SWEEP_COUNT)
    _add_counts(p)
    p.add_argument("--json")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="accumulate activation norms for Wanda/OWL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", required=True, help="toy model spec JSON")
    p.add_argument("--data", required=True, help="calibration matrix file")
    p.add_argument("--out", required=True, help="norms JSON")
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--threads", type=_positive_int, default=_default_threads())
    p.add_argument("--deterministic", action="store_true", help="sequential, bit-exact accumulation")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("prune", help="prune a checkpoint per component")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS, default="magnitude", help="text encoder method")
    p.add_argument("--image-method", choices=METHODS, default="magnitude", help="image generator method")
    p.add_argument("--text-sparsity", type=_fraction)
    p.add_argument("--image-sparsity", type=_fraction)
    p.add_argument("--total", type=_fraction, help="total sparsity; needs --ratio")
    p.add_argument("--ratio", help="text:image share of pruned weights")
    p.add_argument("--norms", help="activation norms JSON from `calibrate`")
    p.add_argument("--group", choices=GROUPS, help="override the comparison group")
    p.add_argument("--owl", action="store_true", help="outlier-weighted layerwise sparsity")
    p.add_argument("--owl-lambda", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--owl-m", type=float, default=DEFAULT_M)
    p.add_argument("--owl-scope", choices=("text", "all"), default="text")
    p.add_argument("--threads", type=_positive_int, default=_default_threads())
    p.add_argument("--json", help="write the prune report here")
    p.add_argument("--masks", help="write run-length encoded masks here")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="output divergence of a pruned checkpoint on a toy model")
    p.add_argument("--spec", required=True)
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="zero counts of a pruned checkpoint against its dense source")
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--manifest")
    p.add_argument("--json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fixture", help="write a seeded toy checkpoint, manifest, spec and calibration data")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContainerError, ValueError, KeyError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"prunekit {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"prunekit {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
