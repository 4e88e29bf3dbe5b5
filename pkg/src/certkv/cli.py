"""Command-line entry point: run workloads, verify bounds, emit reports.

Subcommands:
  run     execute a workload from a JSON config and write JSONL telemetry
  verify  run a bound-verification suite against the brute-force oracles
  report  print analytic tables (working-set union, storage layout)

Exit codes: 0 success; 1 verification violations; 2 usage/config errors;
3 hard runtime errors (full-precision originals unavailable).
"""

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import _kernels, __version__
from .cache import Tier2UnavailableError, storage_table
from .fallback import PolicyConfig
from .harness import (RNG_ALGORITHM, WorkloadConfig, generate_workload,
                      gqa_union, run_workload)
from .verification import run_suite

_CONFIG_SECTIONS = {"workload", "policy", "scratch", "seed", "layers"}
_SCRATCH_FIELDS = {"key_capacity", "value_capacity"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunManifest:
    """Resolved inputs of one run; echoed verbatim into the telemetry header."""

    config_path: str
    out_path: str
    seed: int | None = None  # optional override of the config seed

    def resolve(self):
        try:
            with open(self.config_path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"malformed JSON at line {exc.lineno}, column {exc.colno}: "
                f"{exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(raw) - _CONFIG_SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        workload_raw = dict(raw.get("workload", {}))
        if self.seed is not None:
            workload_raw["seed"] = self.seed
        elif "seed" in raw:
            workload_raw.setdefault("seed", raw["seed"])
        try:
            workload = WorkloadConfig.from_dict(workload_raw)
            policy = PolicyConfig.from_dict(raw.get("policy", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

        scratch = dict(raw.get("scratch", {}))
        unknown = set(scratch) - _SCRATCH_FIELDS
        if unknown:
            raise ConfigError(f"unknown scratch fields: {sorted(unknown)}")
        key_capacity = int(scratch.get("key_capacity", 2048))
        value_capacity = int(scratch.get("value_capacity", 2048))
        layers = int(raw.get("layers", 1))
        return workload, policy, key_capacity, value_capacity, layers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _dump_line(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def cmd_run(manifest):
    """Execute a workload and write telemetry: one header line, one line per
    step, one summary line.  Deterministic bytes for a fixed manifest."""
    workload_cfg, policy, key_cap, value_cap, layers = manifest.resolve()
    workload = generate_workload(workload_cfg)
    result = run_workload(workload, policy, key_capacity=key_cap,
                          value_capacity=value_cap, layers=layers)
    header = dict(result.header)
    header["kind"] = "header"
    header["manifest"] = {"config_path": manifest.config_path,
                          "seed_override": manifest.seed}
    header["rng"] = RNG_ALGORITHM
    header["kernel_backend"] = _kernels.get_backend().NAME
    header["version"] = __version__
    with open(manifest.out_path, "w") as fh:
        fh.write(_dump_line(header) + "\n")
        for record in result.step_records:
            fh.write(_dump_line({"kind": "step", **record}) + "\n")
        fh.write(_dump_line({"kind": "summary", **result.summary}) + "\n")
    return result


def cmd_verify(suite, trials=None, seed=0, out=sys.stdout):
    """Run a verification suite; prints one line per property."""
    results = run_suite(suite, trials=trials, seed=seed)
    for res in results:
        print(res.line(), file=out)
    failed = sum(1 for r in results if not r.ok)
    print(f"{suite}: {len(results) - failed}/{len(results)} properties ok",
          file=out)
    return results


def cmd_report(kind, params, out=sys.stdout):
    """Emit a deterministic analytic table and its JSON form."""
    if kind == "union":
        contexts = params.get("contexts") or [8192, 32768, 65536, 131072, 262144]
        rows = []
        print(f"{'context':>10} {'blocks':>8} {'union_blocks':>14} {'fraction':>9}",
              file=out)
        for n in contexts:
            blocks = -(-n // params["block_size"])
            union_blocks, fraction = gqa_union(
                n, params["block_size"], params["k_max"],
                params["query_heads"], params["rung1_active"])
            rows.append({"context": n, "blocks": blocks,
                         "union_blocks": union_blocks, "fraction": fraction})
            print(f"{n:>10} {blocks:>8} {union_blocks:>14.1f} {fraction:>9.4f}",
                  file=out)
        payload = {"kind": "union", "params": params, "rows": rows}
    elif kind == "storage":
        report = storage_table(params["head_dim"], params["block_size"],
                               params["group_size"])
        print(f"{'component':<22} {'bytes/token':>12}", file=out)
        for label, value in (
                ("keys_int8", report.key_codes_bytes),
                ("key_scales_offsets", report.key_metadata_bytes),
                ("values_int4", report.value_codes_bytes),
                ("value_scales_offsets", report.value_metadata_bytes),
                ("error_annotation", report.annotation_bytes),
        ):
            print(f"{label:<22} {value:>12.2f}", file=out)
        print(f"{'tier1_total':<22} {report.tier1_total_bytes:>12.2f}", file=out)
        print(f"{'dense_fp16':<22} {report.dense_bytes:>12.2f}", file=out)
        print(f"{'ratio_vs_dense':<22} {report.tier1_ratio:>12.4f}", file=out)
        payload = {"kind": "storage", "params": params,
                   "report": report.to_dict()}
    else:
        raise ConfigError(f"unknown report kind {kind!r}")
    print(_dump_line(payload), file=out)
    return payload


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="certkv",
        description="Certified bounded-error quantized attention over a "
                    "tiered KV cache")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a workload config")
    run_p.add_argument("--config", required=True, help="JSON config path")
    run_p.add_argument("--out", required=True, help="telemetry JSONL path")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    verify_p = sub.add_parser("verify", help="run bound-verification suites")
    verify_p.add_argument("--suite", default="all",
                          choices=["bounds", "fallback", "storage", "all"])
    verify_p.add_argument("--trials", type=int, default=None,
                          help="override per-property trial counts")
    verify_p.add_argument("--seed", type=int, default=0)

    report_p = sub.add_parser("report", help="emit analytic tables")
    report_p.add_argument("--kind", required=True, choices=["union", "storage"])
    report_p.add_argument("--block-size", type=int, default=16)
    report_p.add_argument("--k-max", type=int, default=128)
    report_p.add_argument("--query-heads", type=int, default=32)
    report_p.add_argument("--contexts", type=str, default=None,
                          help="comma-separated context lengths (union)")
    report_p.add_argument("--no-rung1", action="store_true",
                          help="size the union without coverage expansion")
    report_p.add_argument("--head-dim", type=int, default=128)
    report_p.add_argument("--group-size", type=int, default=16)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cmd_run(RunManifest(config_path=args.config, out_path=args.out,
                                seed=args.seed))
            return 0
        if args.command == "verify":
            results = cmd_verify(args.suite, trials=args.trials, seed=args.seed)
            return 0 if all(r.ok for r in results) else 1
        if args.command == "report":
            if args.kind == "union":
                params = {
                    "block_size": args.block_size,
                    "k_max": args.k_max,
                    "query_heads": args.query_heads,
                    "rung1_active": not args.no_rung1,
                    "contexts": ([int(c) for c in args.contexts.split(",")]
                                 if args.contexts else None),
                }
            else:
                params = {"head_dim": args.head_dim,
                          "block_size": args.block_size,
                          "group_size": args.group_size}
            cmd_report(args.kind, params)
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Tier2UnavailableError as exc:
        print(f"hard error: {exc}", file=sys.stderr)
        return 3
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
