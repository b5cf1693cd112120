"""``dhtee`` command line over the scenario runner and the perf sweep.

Exit codes: 0 success, 1 a scenario assertion failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .perf import run_sweep, write_csv
from .scenario import (
    ConfigError,
    ScenarioTrace,
    bundled_path,
    bundled_scenarios,
    parse_config,
    run_extension,
    run_scenario,
)
from .simnet import ConfigInvalid
from .tee import DuplicateScheme

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG = 0, 1, 2


def _resolve(name: str) -> str:
    """A path on disk, or the name of a bundled scenario file."""
    if Path(name).exists():
        return name
    for candidate in (name, f"{name}.json"):
        if candidate in bundled_scenarios():
            return str(bundled_path(candidate))
    return name


def _print_trace(result: ScenarioTrace, out) -> None:
    print(f"scenario {result.name}  seed {result.seed}  rounds {result.rounds}", file=out)
    print(f"trace digest {result.digest.hex()}  events {len(result.trace)}", file=out)
    for a in result.assertions:
        status = "PASS" if a.passed else "FAIL"
        print(f"  {status} {a.name}" + (f": {a.detail}" if a.detail else ""), file=out)


def cmd_run(args, out) -> int:
    result = run_scenario(parse_config(_resolve(args.file)), seed=args.seed, trace_path=args.trace)
    _print_trace(result, out)
    return EXIT_OK if result.passed else EXIT_ASSERT


def cmd_perf(args, out) -> int:
    cfg = parse_config(_resolve(args.file))
    if "workload" not in cfg:
        raise ConfigError(cfg["_source"], 1, 1, "perf needs a 'workload' section")
    rows = run_sweep(cfg, seed=args.seed)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(rows, fh)
        print(f"wrote {len(rows)} rows to {args.out}", file=out)
    else:
        write_csv(rows, out)
    return EXIT_OK


def cmd_extend(args, out) -> int:
    report = run_extension(_resolve(args.base), _resolve(args.fixture), seed=args.seed,
                           trace_path=args.trace)
    print(f"base trace digest {report.base.digest.hex()}", file=out)
    print(f"  {'PASS' if report.prefix_identical else 'FAIL'} frozen-prefix", file=out)
    detail = ", ".join(report.frozen_diff)
    print(f"  {'PASS' if not report.frozen_diff else 'FAIL'} frozen-state" + (f": {detail}" if detail else ""),
          file=out)
    _print_trace(report.extended, out)
    return EXIT_OK if report.passed else EXIT_ASSERT


def cmd_list(args, out) -> int:
    for name in bundled_scenarios():
        print(name, file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--trace", default=None, metavar="PATH",
                        help="write the event trace as JSON lines")

    parser = argparse.ArgumentParser(prog="dhtee",
                                     description="Heterogeneous-TEE attestation simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run a scenario and check its assertions")
    p.add_argument("file")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("perf", parents=[common], help="latency/throughput sweep to CSV")
    p.add_argument("file")
    p.add_argument("--out", default=None, metavar="PATH")
    p.set_defaults(func=cmd_perf)
    p = sub.add_parser("extend", parents=[common], help="install a new scheme mid-run")
    p.add_argument("base")
    p.add_argument("fixture")
    p.set_defaults(func=cmd_extend)
    p = sub.add_parser("list", help="list bundled scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, out)
    except DuplicateScheme as exc:
        print(f"error: DuplicateScheme: {exc}", file=err)
        return EXIT_CONFIG
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=err)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
