"""``fedsim`` command line: run, compare, gradcheck, partition-report.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import kernels
from .errors import ConfigError, FedsimError
from .harness import (compare_strategies, format_comparison, load_config, partition_report, run_experiment,
                      validate_config)
from .nn import ModelSpec, finite_difference_check

GRADCHECK_SPECS = {
    "dense+bn+relu": ModelSpec(5, ((7, True), (6, True)), 4),
    "dense+relu": ModelSpec(5, ((6, False), (4, False)), 3),
    "mixed": ModelSpec(4, ((6, True), (5, False)), 3),
}
GRADCHECK_TOL = 1e-4


def _with_overrides(path, out=None, seed=None) -> dict:
    cfg = load_config(path)
    if seed is not None:
        cfg["master_seed"] = seed
    if out is not None:
        cfg["output"] = out
    return validate_config(cfg)


def cmd_run(args) -> int:
    cfg = _with_overrides(args.config, args.out, args.seed)
    result = run_experiment(cfg)
    last = [m for m in result.metrics if m.round == cfg["federation"]["rounds"]]
    if last:
        mean = sum(m.test_accuracy for m in last) / len(last)
        print(f"{cfg['federation']['strategy']}: mean final accuracy {100 * mean:.2f}% -> {cfg['output']}")
    return 0


def cmd_compare(args) -> int:
    cfg = _with_overrides(args.config, args.out, args.seed)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise ConfigError("strategies: empty list")
    table = compare_strategies(cfg, strategies)
    print(format_comparison(table))
    print(f"comparison written to {cfg['output']}/comparison.csv")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    worst = 0.0
    for label, spec in GRADCHECK_SPECS.items():
        report = finite_difference_check(spec, seed=args.seed)
        for name, err in report.items():
            worst = max(worst, err)
            if args.verbose:
                print(f"{label:>14}  {name:<16} {err:.3e}")
        print(f"{label:>14}  max relative error {max(report.values()):.3e}")
    ok = worst < GRADCHECK_TOL
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} "
          f"(tol {GRADCHECK_TOL:g}, backend {kernels.BACKEND}, {time.perf_counter() - start:.2f}s)")
    return 0 if ok else 1


def cmd_partition_report(args) -> int:
    cfg = _with_overrides(args.config, seed=args.seed)
    print(partition_report(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one strategy from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several strategies on the same partition")
    p.add_argument("--config", required=True)
    p.add_argument("--strategies", default="fedavg,fedbn,fedap")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("partition-report", help="print per-client label histograms")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_partition_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FedsimError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
