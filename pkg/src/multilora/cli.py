"""Command line entry point: ``multilora <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .engine import ServingMode, merge_weights, unmerge_weights
from .errors import LayerMismatchError, LoraError
from .model import ModelConfig, Placement, attach_placement, build_model
from .registry import (
    ADAPTER_SUFFIX,
    AdapterRegistry,
    Manifest,
    deserialize_adapter,
    serialize_adapter,
)
from .scheduler import CostModel, SchedulerConfig, load_trace, simulate_workload
from .weights import read_weights, write_weights

DEFAULT_MODEL = ModelConfig(vocab=64, d_model=16, n_layers=2, d_ff=32, seed=0)


def _model_config(path: str | None) -> ModelConfig:
    return ModelConfig.load(path) if path else DEFAULT_MODEL


def _adapter_id_from_path(path: str) -> str:
    name = Path(path).name
    return name[: -len(ADAPTER_SUFFIX)] if name.endswith(ADAPTER_SUFFIX) else Path(path).stem


def cmd_gen_adapter(args) -> int:
    model = build_model(_model_config(args.model))
    placement = Placement.parse(args.placement, shared_b=args.shared_b)
    adapter = attach_placement(
        model,
        placement,
        args.rank,
        args.alpha if args.alpha is not None else float(args.rank),
        adapter_id=args.id or _adapter_id_from_path(args.out),
        seed=args.seed,
        zero_b=args.zero_b,
    )
    data = serialize_adapter(adapter)
    Path(args.out).write_bytes(data)
    print(f"wrote {args.out}: {len(adapter.entries)} layers, {len(data)} bytes")
    return 0


def cmd_export_base(args) -> int:
    model = build_model(_model_config(args.model))
    write_weights(args.out, model.weights)
    print(f"wrote {args.out}: {len(model.weights)} matrices")
    return 0


def cmd_merge(args) -> int:
    base = read_weights(args.base)
    path = args.adapter
    adapter = deserialize_adapter(Path(path).read_bytes(), _adapter_id_from_path(path))
    merged = dict(base)
    worst = 0.0
    for layer_id, delta in adapter.entries.items():
        if layer_id not in base:
            raise LayerMismatchError(f"adapter layer {layer_id!r} not in base weights")
        merged[layer_id] = merge_weights(base[layer_id], delta)
        if args.report_roundtrip:
            back = unmerge_weights(merged[layer_id], delta)
            err = np.max(np.abs(back.astype(np.float64) - base[layer_id].astype(np.float64)))
            worst = max(worst, float(err))
    write_weights(args.out, merged)
    print(f"wrote {args.out}: merged {len(adapter.entries)} layers")
    if args.report_roundtrip:
        print(f"max_unmerge_error: {worst:.9g}")
    return 0


def cmd_serve(args) -> int:
    from .service import ServerConfig, serve

    serve(ServerConfig.load(args.config))
    return 0


def cmd_bench(args) -> int:
    trace = load_trace(args.trace)
    modes = [ServingMode.parse(m) for m in args.modes.split(",")]
    config = SchedulerConfig(args.max_batch, args.window_ms)
    cost = CostModel(args.base_ms, args.per_row_ms, args.swap_ms)
    results = [simulate_workload(trace, mode, config, cost) for mode in modes]
    if args.json:
        for m in results:
            d = m.to_dict()
            d.pop("latencies_ms")
            print(json.dumps(d, sort_keys=True))
        return 0
    header = f"{'mode':<8} {'done':>6} {'mean_ms':>10} {'p50_ms':>10} {'p99_ms':>10} {'req/s':>10} {'swaps':>6} {'batches':>7}"
    print(header)
    for m in results:
        print(
            f"{m.mode:<8} {m.completed:>6} {m.mean_ms:>10.3f} {m.p50_ms:>10.3f} "
            f"{m.p99_ms:>10.3f} {m.throughput_rps:>10.1f} {m.swap_count:>6} {len(m.batch_sizes):>7}"
        )
    return 0


def cmd_sync_plan(args) -> int:
    from .registry import diff_sync_plan

    for adapter_id in diff_sync_plan(Manifest.load(args.local), Manifest.load(args.remote)):
        print(adapter_id)
    return 0


def cmd_manifest(args) -> int:
    sys.stdout.write(AdapterRegistry(args.registry).manifest().to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multilora", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-adapter", help="write a random adapter file")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--rank", type=int, required=True)
    g.add_argument("--alpha", type=float, default=None, help="defaults to the rank (scale 1)")
    g.add_argument("--placement", default="attention",
                   help="comma list of attention,qkv,attn_out,embedding,unembedding,mlp,all")
    g.add_argument("--shared-b", action="store_true", help="share one B across q/k/v")
    g.add_argument("--zero-b", action="store_true", help="all-zero B factors")
    g.add_argument("--model", help="model config file (default: built-in toy config)")
    g.add_argument("--id", help="adapter id (default: output file stem)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_adapter)

    e = sub.add_parser("export-base", help="write the base model weights file")
    e.add_argument("--model")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_base)

    m = sub.add_parser("merge", help="fold an adapter into base weights")
    m.add_argument("--base", required=True, help="weights file from export-base")
    m.add_argument("--adapter", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--report-roundtrip", action="store_true",
                   help="print the max |unmerge(merge(W)) - W|")
    m.set_defaults(func=cmd_merge)

    s = sub.add_parser("serve", help="run the HTTP server")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_serve)

    b = sub.add_parser("bench", help="simulate a trace under several serving modes")
    b.add_argument("--trace", required=True)
    b.add_argument("--modes", default="merged,swap,batched")
    b.add_argument("--max-batch", type=int, default=8)
    b.add_argument("--window-ms", type=float, default=0.0)
    b.add_argument("--base-ms", type=float, default=1.0)
    b.add_argument("--per-row-ms", type=float, default=1.0)
    b.add_argument("--swap-ms", type=float, default=4.0)
    b.add_argument("--json", action="store_true", help="one JSON record per mode")
    b.set_defaults(func=cmd_bench)

    y = sub.add_parser("sync-plan", help="adapter ids to fetch from remote")
    y.add_argument("local")
    y.add_argument("remote")
    y.set_defaults(func=cmd_sync_plan)

    r = sub.add_parser("manifest", help="print the manifest of a registry directory")
    r.add_argument("--registry", required=True)
    r.set_defaults(func=cmd_manifest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (LoraError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
