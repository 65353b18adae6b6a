"""Command-line entry point: scenario runner, trace comparison, log replay and bound tables.

Exit codes: 0 pass, 1 assertion or verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .bitstats import PRESETS, accept, compare_traces, failed_predicates
from .clustering import GameParams, dishonest_accept_upper_bound, honest_accept_lower_bound
from .commitments import read_trace
from .contract import replay
from .errors import ScenarioError, ShapeMismatch, VinferError
from .experiments import load_scenarios, payoff_table, run_scenario

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_SEED = 0
PRECISION = 6


def _err(msg: str) -> None:
    print(f"vinfer: {msg}", file=sys.stderr)


def cmd_montecarlo(args) -> int:
    try:
        scenarios = load_scenarios(args.scenario)
        if args.trials is not None and args.trials < 1:
            raise ScenarioError("trials must be >= 1")
    except ScenarioError as exc:
        _err(str(exc))
        return EXIT_USAGE
    out = Path(args.out)
    reports = []
    for sc in scenarios:
        report = run_scenario(sc, trials=args.trials, seed=args.seed, keep_logs=args.logs)
        report.write(out)
        reports.append(report)
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {report.scenario} ({report.kind}, {report.trials} trials)")
        for a in report.assertions:
            mark = "ok  " if a["pass"] else "FAIL"
            print(f"  {mark} {a['metric']} {a['op']} {a['value']} (observed {a['observed']})")
    if any(r.scenario == "honest" for r in reports) and any(r.payoffs for r in reports):
        rows = payoff_table(reports)
        (out / "payoffs.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
        for row in rows:
            print(f"  payoff {row['role']}:{row['strategy']} {row['payoff']:.2f} vs honest "
                  f"{row['honest_payoff']:.2f} (margin {row['margin']:.2f})")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_compare(args) -> int:
    tol = PRESETS[args.preset]
    try:
        ref = read_trace(args.reference)
        cand = read_trace(args.candidate)
        stats = compare_traces(ref, cand, tol)
    except ShapeMismatch as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    ok = accept(stats, tol)
    print(json.dumps({"preset": args.preset, "stats": asdict(stats), "accept": ok,
                      "failed": failed_predicates(stats, tol)}, sort_keys=True))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_replay(args) -> int:
    try:
        with open(args.log, newline="") as fh:
            lines = fh.read().splitlines(keepends=True)
    except OSError as exc:
        _err(f"{args.log}: {exc.strerror}")
        return EXIT_USAGE
    rep = replay(lines)
    if rep.truncated:
        _err(f"warning: log truncated after {rep.events} complete events")
    if rep.ok:
        print(f"replay ok: {rep.events} events")
        return EXIT_OK
    print(f"replay diverged at event {rep.divergent_index}: {rep.reason}")
    return EXIT_FAIL


def cmd_bounds(args) -> int:
    try:
        params = GameParams(n=args.n, q=args.q, eps1=args.eps1, eps2=args.eps2, r=args.r)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    ub = dishonest_accept_upper_bound(params)
    values = {"honest_lower_bound": honest_accept_lower_bound(params), "p_d1": ub.p_d1, "p_d2": ub.p_d2,
              "p_d3": ub.p_d3, "dishonest_total": ub.total, "dishonest_naive_total": ub.naive_total}
    if args.json:
        print(json.dumps({k: round(v, PRECISION) for k, v in values.items()}, sort_keys=True))
    else:
        width = max(map(len, values))
        for k, v in values.items():
            print(f"{k:<{width}}  {v:.{PRECISION}f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vinfer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    mc = sub.add_parser("montecarlo", help="run a scenario file and write its report")
    mc.add_argument("scenario", help="scenario JSON file")
    mc.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"master seed (default {DEFAULT_SEED})")
    mc.add_argument("--trials", type=int, default=None, help="override the scenario's trial count")
    mc.add_argument("--out", default="vinfer-report", help="report directory")
    mc.add_argument("--logs", type=int, default=1, help="contract logs to keep per protocol scenario")
    mc.set_defaults(func=cmd_montecarlo)

    cp = sub.add_parser("compare", help="compare two trace files bit-wise")
    cp.add_argument("reference")
    cp.add_argument("candidate")
    cp.add_argument("--preset", choices=sorted(PRESETS), default="off-chain")
    cp.set_defaults(func=cmd_compare)

    rp = sub.add_parser("replay", help="re-execute a contract event log")
    rp.add_argument("log")
    rp.set_defaults(func=cmd_replay)

    bd = sub.add_parser("bounds", help="print the acceptance-probability bounds")
    bd.add_argument("--n", type=int, default=6)
    bd.add_argument("--q", type=int, default=4)
    bd.add_argument("--eps1", type=float, default=0.01)
    bd.add_argument("--eps2", type=float, default=0.01)
    bd.add_argument("--r", type=float, default=0.8)
    bd.add_argument("--json", action="store_true")
    bd.set_defaults(func=cmd_bounds)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VinferError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
