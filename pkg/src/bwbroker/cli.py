"""Command-line front end: ``bwbroker run|alloc|bound|bench``.

Exit codes: 0 on success (and every scenario assertion holding), 1 when
an assertion fails, 2 on a missing file or invalid input. The log level
comes from the ``BWBROKER_LOG`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from collections.abc import Sequence

from bwbroker.core.allocator import aggregate_demands, bench_water_fill, distribute
from bwbroker.core.latency import (
    Mm1Model,
    bound_table,
    format_bound_table,
    mm1_fct_quantile,
    sigma_from_convergence,
)
from bwbroker.data.config import load_demands, load_policy, load_scenario
from bwbroker.errors import BwBrokerError
from bwbroker.sim.runner import run
from bwbroker.utils.units import format_bandwidth, parse_bandwidth

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ASSERTION_FAILED = 1
EXIT_USAGE = 2

LOG_ENV = "BWBROKER_LOG"
_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
_BENCH_SIZES = (100, 1_000, 10_000, 100_000)


def configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if level not in _LEVELS:
        level = "WARNING"
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _bandwidth(value: str) -> float:
    try:
        return float(parse_bandwidth(value))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bwbroker", description="Hierarchical datacenter bandwidth sharing toolkit."
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p_run = commands.add_parser("run", help="simulate a scenario and check its assertions")
    p_run.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    p_run.add_argument("--seed", type=int, help="override the scenario seed")
    p_run.add_argument("--out", help="directory for util/flows/alloc/queues CSVs and summary")
    p_run.add_argument("--gnuplot", action="store_true", help="also write plot.gp")
    p_run.add_argument("--no-brokers", action="store_true", help="run without rack/fabric brokers")
    p_run.add_argument("--no-shaping", action="store_true",
                       help="run without brokers, meters or limiters")

    p_alloc = commands.add_parser("alloc", help="allocate a policy tree for given demands")
    p_alloc.add_argument("policy", help="policy JSON file")
    p_alloc.add_argument("demands", nargs="?", help="demands JSON file keyed by leaf name or id")
    p_alloc.add_argument("--bench", type=int, metavar="N",
                         help="also time a single-level water-fill over N services")

    p_bound = commands.add_parser("bound", help="FCT bound or M/M/1 FCT quantile")
    p_bound.add_argument("--sigma", type=float, help="burst allowance in bits")
    p_bound.add_argument("--conv-iters", type=int, help="meter iterations to converge")
    p_bound.add_argument("--interval", type=float, help="meter interval in seconds")
    p_bound.add_argument("--burst", type=int, default=0, help="limiter burst in bytes")
    p_bound.add_argument("--rho", type=float, nargs="+", required=True, help="load(s)")
    p_bound.add_argument("--capacity", type=_bandwidth, help="link capacity, e.g. 10Gb/s")
    p_bound.add_argument("--size", type=int, nargs="+", help="flow size(s) in bytes")
    p_bound.add_argument("--mm1", action="store_true", help="M/M/1 quantile instead")
    p_bound.add_argument("--mu", type=float, help="M/M/1 service rate, flows per second")
    p_bound.add_argument("--quantile", type=float, default=0.99, help="M/M/1 quantile")

    p_bench = commands.add_parser("bench", help="time single-level water-fill")
    p_bench.add_argument("--sizes", type=int, nargs="+", default=list(_BENCH_SIZES))
    p_bench.add_argument("--repeats", type=int, default=5)
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    if args.no_brokers or args.no_shaping:
        scenario = dataclasses.replace(scenario, brokers=False)
    if args.no_shaping:
        scenario = dataclasses.replace(scenario, shaping=False)
    trace = run(scenario)
    if args.out:
        trace.write(args.out, gnuplot=args.gnuplot)
    summary = trace.summary()
    print(f"scenario {scenario.name} (engine {scenario.engine}, seed {scenario.seed})")
    for name, stats in summary["workloads"].items():
        p99 = stats["p99_fct_s"]
        p99_text = "-" if p99 is None else f"{float(p99) * 1e3:.2f}ms"
        print(f"  {name}: {stats['finished']}/{stats['flows']} flows finished, p99 FCT {p99_text}")
    for label, seconds in summary["convergence_s"].items():
        print(f"  converged {label}: {seconds:g}s")
    for rack, at_s in summary["fabric_reverts_s"].items():
        print(f"  rack {rack} reverted to static policy at {at_s:g}s")
    for result in trace.assertions:
        status = "PASS" if result.passed else "FAIL"
        print(f"  {status} {result.label} = {result.value:.6g}")
    return EXIT_OK if trace.passed else EXIT_ASSERTION_FAILED


def cmd_alloc(args: argparse.Namespace) -> int:
    tree = load_policy(args.policy)
    demands = load_demands(args.demands, tree)
    allocation = distribute(tree, aggregate_demands(tree, demands))
    print(f"{'leaf':<16} {'id':>10} {'demand':>14} {'allocation':>14} limited")
    for leaf in tree.leaves:
        node = tree.node(leaf)
        alloc = allocation[leaf]
        print(f"{node.label:<16} {leaf:>10} {format_bandwidth(demands[leaf]):>14} "
              f"{format_bandwidth(alloc.rate):>14} {'yes' if alloc.limited else 'no'}")
    if args.bench:
        best = bench_water_fill(args.bench)
        print(f"water_fill n={args.bench}: {best * 1e3:.3f} ms per invocation")
    return EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    if args.mm1:
        if args.mu is None:
            raise BwBrokerError("--mm1 needs --mu")
        for rho in args.rho:
            quantile = mm1_fct_quantile(Mm1Model(args.mu, rho), args.quantile)
            print(f"rho={rho:g} p{args.quantile * 100:g} FCT = {quantile * 1e3:.2f}ms")
        return EXIT_OK
    if args.capacity is None or not args.size:
        raise BwBrokerError("bound needs --capacity and --size")
    if args.sigma is not None:
        sigma = args.sigma + args.burst * 8
    elif args.conv_iters is not None and args.interval is not None:
        sigma = sigma_from_convergence(args.conv_iters, args.interval, args.capacity,
                                       args.burst * 8)
    else:
        raise BwBrokerError("bound needs --sigma or --conv-iters with --interval")
    rows = bound_table(sigma, args.capacity, args.rho, [z * 8.0 for z in args.size])
    print(f"sigma = {sigma:.6g} bits, C = {format_bandwidth(args.capacity)}")
    print(format_bound_table(rows))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    print(f"{'n':>8} {'best_ms':>10} {'ns_per_service':>15}")
    for n in args.sizes:
        best = bench_water_fill(n, repeats=args.repeats)
        print(f"{n:>8} {best * 1e3:>10.3f} {best * 1e9 / n:>15.1f}")
    return EXIT_OK


_COMMANDS = {"run": cmd_run, "alloc": cmd_alloc, "bound": cmd_bound, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as e:
        print(f"bwbroker: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (BwBrokerError, ValueError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"bwbroker: {e}", file=sys.stderr)
        return EXIT_USAGE
