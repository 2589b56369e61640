"""Command line pipeline: patterns -> prune -> reorder -> encode -> tune -> run.

Exit codes: 0 ok, 2 validation problem, 3 numeric divergence, 4 I/O failure.
Failures print one machine-readable JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import synth
from .admm import (DivergenceError, PruneConfig, check_feasibility, prune,
                   write_trace_csv)
from .executor import (DEFAULT_CONFIG, ConfigError, ExecConfig,
                       conv_csr, conv_fkw, lre_load_model)
from .fkw import (FkwFormatError, csr_encode, fkw_decode, fkw_encode,
                  read_fkw, structure_overhead, write_fkw)
from .lr import LayerRecord, LrValidationError, ModelManifest, lr_emit, lr_parse
from .nets import train
from .patterns import PatternError, PatternSet, build_pattern_set
from .reorder import dense_from_sparse, reorder, sparse_from_dense
from .tensors import FeatureMap, ShapeError, WeightTensor, read_tensor, write_tensor
from .tuner import tune


class OracleMismatch(ArithmeticError):
    """Executor output strayed from the dense reference."""


def _fail(exc: Exception, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def _out_path(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _load_pattern_set(path: str) -> PatternSet:
    with open(path) as handle:
        return PatternSet.from_json(handle.read())


def _load_config(path: Optional[str]) -> ExecConfig:
    if path is None:
        return DEFAULT_CONFIG
    with open(path) as handle:
        return ExecConfig.from_json_dict(json.load(handle))


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_gen_patterns(args) -> int:
    if args.weights:
        tensors = []
        for path in args.weights:
            tensor = read_tensor(path)
            if not isinstance(tensor, WeightTensor):
                raise ShapeError(f"{path} is not a weight tensor file")
            tensors.append(tensor)
    else:
        net = synth.build_toy_net(args.seed)
        tensors = net.to_weight_tensors()
    pattern_set = build_pattern_set(tensors, args.k)
    path = args.out or _out_path(args, "patterns.json")
    with open(path, "w") as handle:
        handle.write(pattern_set.to_json())
    print(json.dumps({"patterns": pattern_set.k, "file": path}))
    return 0


def _toy_setup(args):
    x, y = synth.two_blob_dataset(args.samples, args.seed)
    net = synth.build_toy_net(args.seed + 1)
    train(net, x, y, epochs=args.pretrain_epochs, lr=1e-3,
          batch_size=32, seed=args.seed + 2)
    return x, y, net


def cmd_prune(args) -> int:
    x, y, net = _toy_setup(args)
    pattern_set = build_pattern_set(net.to_weight_tensors(), args.k)
    cfg = PruneConfig(pattern_set=pattern_set,
                      connectivity_rate=args.rate,
                      first_layer_rate=args.first_layer_rate,
                      admm_iterations=args.iterations,
                      epochs_per_iteration=args.epochs,
                      learning_rate=1e-3, rho=args.rho, seed=args.seed,
                      fine_tune_epochs=args.fine_tune_epochs)
    baseline = net.clone()
    extra = args.iterations * args.epochs + args.fine_tune_epochs
    train(baseline, x, y, epochs=extra, lr=1e-3, batch_size=32,
          seed=args.seed + 3)
    result = prune(net, (x, y), cfg)
    feasibility = check_feasibility(net, cfg)

    with open(_out_path(args, "patterns.json"), "w") as handle:
        handle.write(pattern_set.to_json())
    weight_files = []
    for i, tensor in enumerate(net.to_weight_tensors()):
        path = _out_path(args, f"layer{i}.ptk")
        write_tensor(path, tensor)
        weight_files.append(path)
    assignment_payload = {"layers": [
        {"filters": [[None if pid < 0 else int(pid) for pid in row]
                     for row in layer.tolist()]}
        for layer in result.assignments]}
    with open(_out_path(args, "assignments.json"), "w") as handle:
        json.dump(assignment_payload, handle, indent=2)
    write_trace_csv(_out_path(args, "trace.csv"), result.trace)
    summary = {
        "seed": args.seed, "k": args.k, "rate": args.rate,
        "dense_accuracy": baseline.accuracy(x, y),
        "pruned_accuracy": net.accuracy(x, y),
        "layers": [{"nonzero_kernels": nz, "alpha": alpha}
                   for nz, alpha in feasibility],
        "weight_files": weight_files,
    }
    with open(_out_path(args, "summary.json"), "w") as handle:
        json.dump(summary, handle, indent=2)
    print(json.dumps(summary))
    return 0


def cmd_reorder(args) -> int:
    tensor = read_tensor(args.weights)
    if not isinstance(tensor, WeightTensor):
        raise ShapeError(f"{args.weights} is not a weight tensor file")
    pattern_set = _load_pattern_set(args.patterns)
    layer = sparse_from_dense(tensor, pattern_set)
    ordered, plan = reorder(layer)
    payload = {"plan": plan.to_json_dict(),
               "filters": [[{"in_channel": k.in_channel,
                             "pattern_id": k.pattern_id}
                            for k in kernels] for kernels in ordered.filters]}
    path = args.out or _out_path(args, "reorder_plan.json")
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
    print(json.dumps({"file": path,
                      "groups": [list(g) for g in plan.group_boundaries]}))
    return 0


def cmd_encode(args) -> int:
    pattern_set = _load_pattern_set(args.patterns)
    records = []
    outputs = []
    for i, weight_path in enumerate(args.weights):
        tensor = read_tensor(weight_path)
        if not isinstance(tensor, WeightTensor):
            raise ShapeError(f"{weight_path} is not a weight tensor file")
        layer = sparse_from_dense(tensor, pattern_set)
        ordered, plan = reorder(layer)
        model = fkw_encode(ordered, plan)
        name = f"layer{i}"
        fkw_name = args.out if (args.out and len(args.weights) == 1) \
            else _out_path(args, f"{name}.fkw")
        write_fkw(fkw_name, model)
        outputs.append(fkw_name)
        present = sorted({k.pattern_id for f in ordered.filters for k in f})
        records.append(LayerRecord.for_layer(
            name, tensor.shape, os.path.basename(fkw_name), present,
            DEFAULT_CONFIG))
    manifest_path = None
    if args.manifest or len(args.weights) > 1:
        manifest = ModelManifest(version="1", pattern_set=pattern_set,
                                 layers=tuple(records))
        manifest_path = args.manifest or _out_path(args, "lr.json")
        with open(manifest_path, "w") as handle:
            handle.write(lr_emit(manifest))
    print(json.dumps({"fkw_files": outputs, "manifest": manifest_path}))
    return 0


def cmd_decode(args) -> int:
    model = read_fkw(args.model)
    layer, plan = fkw_decode(model)
    tensor = dense_from_sparse(layer, plan)
    write_tensor(args.out, tensor)
    if args.json:
        with open(args.json, "w") as handle:
            handle.write(model.to_debug_json())
    print(json.dumps({"weights": args.out, "kernels": model.kernel_count}))
    return 0


def cmd_validate(args) -> int:
    with open(args.manifest) as handle:
        text = handle.read()
    try:
        manifest = lr_parse(text)
    except LrValidationError as exc:
        print(json.dumps({"valid": False, "violations": exc.violations}))
        return 2
    print(json.dumps({"valid": True, "layers": len(manifest.layers)}))
    return 0


def _resolve_run_inputs(args):
    if args.manifest:
        with open(args.manifest) as handle:
            manifest = lr_parse(handle.read())
        record = next((r for r in manifest.layers if r.name == args.layer), None)
        if record is None:
            raise LrValidationError(
                [f"/layers: no layer named {args.layer!r} in the manifest"])
        base = os.path.dirname(os.path.abspath(args.manifest))
        model = read_fkw(os.path.join(base, record.fkw_file))
        return model, record.exec_config()
    if not args.model:
        raise ValueError("run needs --model or --manifest/--layer")
    return read_fkw(args.model), _load_config(args.config)


def cmd_run(args) -> int:
    model, cfg = _resolve_run_inputs(args)
    tensor = read_tensor(args.input)
    if not isinstance(tensor, FeatureMap):
        raise ShapeError(f"{args.input} is not a feature map file")
    start = time.perf_counter_ns()
    output, stats = conv_fkw(tensor, model, cfg, threads=args.threads)
    wall = time.perf_counter_ns() - start
    if args.check_oracle:
        from .tensors import conv_dense
        layer, plan = fkw_decode(model)
        reference = conv_dense(tensor, dense_from_sparse(layer, plan))
        err = float(np.max(np.abs(output.data - reference.data)))
        scale = float(np.max(np.abs(reference.data))) or 1.0
        if err > 1e-5 * scale:
            raise OracleMismatch(
                f"relative error {err / scale:.3e} exceeds 1e-5")
    if args.out:
        write_tensor(args.out, output)
    payload = dict(stats.to_json_dict(), wall_time_ns=wall)
    if args.stats:
        with open(args.stats, "w") as handle:
            json.dump(payload, handle, indent=2)
    print(json.dumps(payload))
    return 0


def cmd_tune(args) -> int:
    model = read_fkw(args.model)
    if args.input:
        tensor = read_tensor(args.input)
        if not isinstance(tensor, FeatureMap):
            raise ShapeError(f"{args.input} is not a feature map file")
    else:
        tensor = synth.random_feature_map(model.shape,
                                          np.random.default_rng(args.seed))
    best, history = tune(model, tensor, budget=args.budget, seed=args.seed,
                         include_default=DEFAULT_CONFIG)
    with open(args.out, "w") as handle:
        json.dump(best.to_json_dict(), handle, indent=2)
    if args.history:
        with open(args.history, "w", newline="") as handle:
            writer = csv.writer(handle)
            width = len(history[0].features)
            writer.writerow([f"f{i}" for i in range(width)] + ["time_ns"])
            for record in history:
                writer.writerow([repr(float(v)) for v in record.features]
                                + [int(record.measured_time * 1e9)])
    print(json.dumps({"best": best.to_json_dict(), "evaluations": len(history)}))
    return 0


def _timed(fn, repeats: int = 3):
    best = None
    result = None
    for _ in range(repeats):
        start = time.perf_counter_ns()
        result = fn()
        elapsed = time.perf_counter_ns() - start
        best = elapsed if best is None else min(best, elapsed)
    return result, best


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    layer, plan = synth.vgg_like_desk_layer(seed=args.seed, k=args.k)
    model = fkw_encode(layer, plan)
    input_fm = synth.random_feature_map(model.shape, rng)
    dense = dense_from_sparse(layer, plan)
    csr = csr_encode(layer, plan)

    from .tensors import conv_dense
    reference, dense_ns = _timed(lambda: conv_dense(input_fm, dense))
    _, csr_ns = _timed(lambda: conv_csr(input_fm, csr))

    variants = {
        "no_opt": ExecConfig(loop_permutation="cohwci_b", tile_h=8, tile_w=8,
                             tile_oc=8, tile_ic=8, unroll_oc=1, unroll_iw=1,
                             lre_enabled=False, reorder_enabled=False),
        "reorder": ExecConfig(loop_permutation="cohwci_b", tile_h=8, tile_w=8,
                              tile_oc=8, tile_ic=8, unroll_oc=1, unroll_iw=1,
                              lre_enabled=False, reorder_enabled=True),
        "lre": ExecConfig(loop_permutation="cohwci_b", tile_h=8, tile_w=8,
                          tile_oc=8, tile_ic=8, unroll_oc=4, unroll_iw=1,
                          lre_enabled=True, reorder_enabled=True),
    }
    tuned_cfg, _ = tune(model, input_fm, budget=args.budget, seed=args.seed,
                        include_default=DEFAULT_CONFIG)
    variants["tuned"] = tuned_cfg

    report = {"seed": args.seed, "k": args.k,
              "layer": {"out_channels": model.shape.out_channels,
                        "in_channels": model.shape.in_channels,
                        "kernels": model.kernel_count},
              "dense_wall_time_ns": dense_ns, "csr_wall_time_ns": csr_ns,
              "variants": {}, "storage": [], "pattern_sweep": []}
    for name, cfg in variants.items():
        (output, stats), wall = _timed(
            lambda cfg=cfg: conv_fkw(input_fm, model, cfg, threads=args.threads))
        err = float(np.max(np.abs(output.data - reference.data)))
        scale = float(np.max(np.abs(reference.data))) or 1.0
        if err > 1e-5 * scale:
            raise OracleMismatch(f"bench variant {name} diverged "
                                 f"(rel {err / scale:.3e})")
        predicted = lre_load_model(model, cfg)
        if predicted != stats:
            raise OracleMismatch(f"bench variant {name}: load model of "
                                 f"{predicted} != measured {stats}")
        report["variants"][name] = {
            "config": cfg.to_json_dict(), "wall_time_ns": wall,
            "loads": stats.to_json_dict(),
            "speedup_vs_dense": dense_ns / wall,
            "speedup_vs_csr": csr_ns / wall,
        }

    for rate in (8.0, 12.0, 18.0):
        big_layer, big_plan = synth.big_pruned_layer(rate, seed=args.seed)
        big_model = fkw_encode(big_layer, big_plan)
        fkw_bytes = structure_overhead(big_model)
        csr_bytes = structure_overhead(csr_encode(big_layer, big_plan))
        report["storage"].append({
            "pruning_rate": rate, "fkw_bytes": fkw_bytes,
            "csr_bytes": csr_bytes,
            "saving_pct": 100.0 * (1.0 - fkw_bytes / csr_bytes),
        })

    for k in args.patterns:
        sweep_layer, sweep_plan = synth.vgg_like_desk_layer(seed=args.seed, k=k)
        sweep_model = fkw_encode(sweep_layer, sweep_plan)
        sweep_input = synth.random_feature_map(sweep_model.shape, rng)
        (_, stats), wall = _timed(
            lambda: conv_fkw(sweep_input, sweep_model, variants["lre"]))
        report["pattern_sweep"].append({
            "k": k, "wall_time_ns": wall,
            "branch_events": stats.branch_events,
        })

    json_path = _out_path(args, "report.json")
    with open(json_path, "w") as handle:
        json.dump(report, handle, indent=2)
    md_path = _out_path(args, "report.md")
    with open(md_path, "w") as handle:
        handle.write(_markdown_report(report))
    print(json.dumps({"report": json_path, "markdown": md_path}))
    return 0


def _markdown_report(report: dict) -> str:
    lines = ["# Bench report", "",
             f"Seed {report['seed']}, {report['layer']['out_channels']}x"
             f"{report['layer']['in_channels']} layer, "
             f"{report['layer']['kernels']} kernels, k={report['k']}.", "",
             "| variant | wall time (ms) | input loads | branches | vs dense | vs CSR |",
             "|---|---|---|---|---|---|"]
    for name, row in report["variants"].items():
        lines.append(
            f"| {name} | {row['wall_time_ns'] / 1e6:.2f} "
            f"| {row['loads']['input_element_loads']} "
            f"| {row['loads']['branch_events']} "
            f"| {row['speedup_vs_dense']:.2f}x | {row['speedup_vs_csr']:.2f}x |")
    lines += ["", "## Storage overhead", "",
              "| pruning rate | FKW bytes | CSR bytes | saving |",
              "|---|---|---|---|"]
    for row in report["storage"]:
        lines.append(f"| {row['pruning_rate']}x | {row['fkw_bytes']} "
                     f"| {row['csr_bytes']} | {row['saving_pct']:.1f}% |")
    lines += ["", "## Pattern count sweep", "",
              "| k | wall time (ms) | dispatches |", "|---|---|---|"]
    for row in report["pattern_sweep"]:
        lines.append(f"| {row['k']} | {row['wall_time_ns'] / 1e6:.2f} "
                     f"| {row['branch_events']} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Parser.

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patconv",
        description="Pattern-based pruning and sparse convolution pipeline")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out-dir", default=".")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-patterns", help="build a candidate pattern set")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--weights", nargs="*", default=[])
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_patterns)

    p = sub.add_parser("prune", help="ADMM-prune the built-in toy task")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--rate", type=float, default=3.6)
    p.add_argument("--first-layer-rate", type=float, default=1.0)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--fine-tune-epochs", type=int, default=10)
    p.add_argument("--pretrain-epochs", type=int, default=30)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--rho", type=float, default=1e-2)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("reorder", help="filter kernel reorder debug dump")
    p.add_argument("--weights", required=True)
    p.add_argument("--patterns", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reorder)

    p = sub.add_parser("encode", help="encode pruned weights to FKW")
    p.add_argument("--weights", nargs="+", required=True)
    p.add_argument("--patterns", required=True)
    p.add_argument("--out", help="output file when encoding a single layer")
    p.add_argument("--manifest", help="also write an LR manifest here")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode FKW back to dense weights")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", help="write a five-array debug dump")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("validate", help="validate an LR manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute one FKW layer")
    p.add_argument("--model")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--layer")
    p.add_argument("--out")
    p.add_argument("--stats")
    p.add_argument("--check-oracle", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("tune", help="auto-tune the execution config")
    p.add_argument("--model", required=True)
    p.add_argument("--input")
    p.add_argument("--budget", type=int, default=48)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", help="ablation benchmark + storage report")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--patterns", type=lambda s: [int(v) for v in s.split(",")],
                   default=[4, 8, 12, 16])
    p.add_argument("--budget", type=int, default=32)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LrValidationError, PatternError, FkwFormatError, ShapeError,
            ConfigError, ValueError) as exc:
        return _fail(exc, 2)
    except (DivergenceError, OracleMismatch, FloatingPointError) as exc:
        return _fail(exc, 3)
    except OSError as exc:
        return _fail(exc, 4)


if __name__ == "__main__":
    sys.exit(main())
