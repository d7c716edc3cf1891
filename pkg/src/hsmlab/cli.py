"""Command-line entry point: ``hsmlab explore | lint | replay``.

Exit status: 0 no attack, clean lint, or trace reproduces; 1 attack found,
violations, or replay fails; 2 usage or parse error; 3 state budget hit.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

from .errors import BudgetExceeded, HsmLabError, ParseError
from .policy import lint
from .scenario import Scenario, format_trace, parse_scenario, parse_trace
from .search import DEFAULT_STATE_CAP, Attack, Reproduces, SearchConfig, explore, replay
from .token import Mode

EXIT_OK, EXIT_FOUND, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return n


def _depth(text: str) -> int:
    n = int(text)
    if n < 0:
        raise argparse.ArgumentTypeError("expected a non-negative integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsmlab", description="Symbolic HSM key-management analyser.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("explore", help="search for an attack up to a depth bound")
    ex.add_argument("--scenario", required=True, type=Path)
    ex.add_argument("--depth", type=_depth)
    ex.add_argument("--policy", type=_on_off)
    ex.add_argument("--mode", choices=[m.value for m in Mode])
    ex.add_argument("--strategy", choices=["bfs", "iddfs"], default="bfs")
    ex.add_argument("--workers", type=_positive, default=1)
    ex.add_argument("--trace-out", type=Path)
    ex.add_argument("--goal", action="append", metavar="KEY", help="restrict the goal to these keys (repeatable)")
    ex.add_argument("--max-states", type=_positive, default=DEFAULT_STATE_CAP)
    ex.add_argument("--reduce", action="store_true", help="prune attacker moves dominated by others")
    ex.add_argument("--stats", action="store_true", help="report throughput and frontier sizes on stderr")

    li = sub.add_parser("lint", help="check a scenario against the configuration rules")
    li.add_argument("--scenario", required=True, type=Path)

    rp = sub.add_parser("replay", help="re-execute a trace against a scenario")
    rp.add_argument("--scenario", required=True, type=Path)
    rp.add_argument("--trace", required=True, type=Path)
    return p


def _load_scenario(path: Path) -> Scenario:
    return parse_scenario(path.read_text(encoding="utf-8"))


def _explore(args) -> int:
    scn = _load_scenario(args.scenario)
    changes = {}
    if args.depth is not None:
        changes["depth"] = args.depth
    if args.policy is not None:
        changes["policy_on"] = args.policy
    if args.mode is not None:
        changes["mode"] = Mode(args.mode)
    scn = dataclasses.replace(scn, **changes)
    if args.goal:
        unknown = sorted(set(args.goal) - {k.id for k in scn.keys})
        if unknown:
            raise ParseError(f"--goal names undeclared keys: {', '.join(unknown)}")
    cfg = SearchConfig(
        max_depth=scn.depth,
        attackers=scn.attackers,
        goal_keys=frozenset(args.goal) if args.goal else None,
        strategy=args.strategy,
        workers=args.workers,
        state_cap=args.max_states,
        reduce=args.reduce,
    )
    stats: dict = {}
    try:
        result = explore(scn, cfg, stats=stats)
    except BudgetExceeded as exc:
        print(f"BUDGET_EXCEEDED limit={exc.limit} explored={exc.explored}")
        return EXIT_BUDGET
    if args.stats:
        frontier = ",".join(map(str, stats.get("frontier", [])))
        print(
            f"STATS seconds={stats['seconds']:.3f} states_per_second={stats['states_per_second']:.0f}"
            f" frontier={frontier}",
            file=sys.stderr,
        )
    if isinstance(result, Attack):
        text = format_trace(result.trace)
        print(f"ATTACK leaked={result.leaked_key} steps={len(result.trace)}")
        sys.stdout.write(text)
        if args.trace_out is not None:
            args.trace_out.write_text(text, encoding="utf-8")
        return EXIT_FOUND
    print(f"EXHAUSTED depth={result.depth} states={result.states_explored}")
    return EXIT_OK


def _lint(args) -> int:
    report = lint(_load_scenario(args.scenario))
    sys.stdout.write(report.format())
    return EXIT_OK if report.ok else EXIT_FOUND


def _replay(args) -> int:
    scn = _load_scenario(args.scenario)
    trace = parse_trace(args.trace.read_text(encoding="utf-8"))
    verdict = replay(scn, trace)
    if isinstance(verdict, Reproduces):
        print(f"REPRODUCES {verdict.leaked_key}")
        return EXIT_OK
    print(f"FAILS step={verdict.step} reason={verdict.reason}")
    return EXIT_FOUND


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"explore": _explore, "lint": _lint, "replay": _replay}[args.command]
    try:
        return handler(args)
    except (ParseError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HsmLabError as exc:
        # Strict setup refused by the policy and similar scenario-level faults.
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
