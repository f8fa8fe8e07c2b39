"""Command-line driver.

Exit codes: 0 success, 1 usage (including missing input files), 2 validation
(policy, assembly, module format, boot, scenario file), 3 runtime failure
(a task died, the scheduler deadlocked, or a scenario expectation failed).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..loader import BootError, PolicyError
from ..modformat import AssemblyError, ModuleFormatError, assemble, encode
from . import graph
from .bench import run_bench
from .scenario import Scenario, ScenarioError
from .session import Session, resolve_scenario

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def cmd_asm(args) -> int:
    src = _existing(args.src)
    image = assemble(src.read_text(encoding="utf-8"), src.stem)
    Path(args.output).write_bytes(encode(image))
    print(f"{args.output}: {len(image.sections)} sections, {len(image.symbols)} symbols")
    return EXIT_OK


def cmd_link(args) -> int:
    s = Session.start(_existing(args.policy))
    sys.stdout.write(graph.to_text(s.system))
    return EXIT_OK


def cmd_graph(args) -> int:
    s = Session.start(_existing(args.policy))
    dot = graph.to_dot(s.system)
    if args.output in (None, "-"):
        sys.stdout.write(dot)
    else:
        Path(args.output).write_text(dot, encoding="utf-8")
    return EXIT_OK


def cmd_run(args) -> int:
    s = Session.start(_existing(args.policy), insecure=args.insecure)
    report = s.run(args.max_steps)
    print(report.to_text())
    sys.stdout.write(s.faults.log.to_text())
    dead = any(state.value == "dead" for state, _ in report.tasks.values())
    return EXIT_RUNTIME if dead or report.outcome == "deadlock" else EXIT_OK


def cmd_bench(args) -> int:
    report = run_bench(args.kind)
    sys.stdout.write(report.to_json() if args.json else report.to_table())
    return EXIT_OK


def cmd_inject(args) -> int:
    try:
        root = resolve_scenario(args.scenario)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    scenario = Scenario.load(root)
    if args.variant is not None:
        scenario.variant(args.variant)
    results = scenario.run_all(args.variant)
    if args.variant is not None:
        results = [r for r in results if r.name == args.variant]
    print(f"# scenario {scenario.name}")
    for r in results:
        print(r.to_text(scenario.digest_targets(r.name)))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compartos", description="Linkage-based compartments on an emulated capability machine.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("asm", help="assemble a source file into a module")
    a.add_argument("src")
    a.add_argument("-o", "--output", required=True)
    a.set_defaults(func=cmd_asm)

    lk = sub.add_parser("link", help="load and link a policy, print compartments and diagnostics")
    lk.add_argument("policy")
    lk.set_defaults(func=cmd_link)

    r = sub.add_parser("run", help="boot a policy and run its tasks")
    r.add_argument("policy")
    r.add_argument("--max-steps", type=int, default=1_000_000)
    r.add_argument("--insecure", action="store_true", help="disable capability checks")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run the shipped microbenchmarks")
    b.add_argument("kind", choices=["switch", "ipc", "fncall"])
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inject", help="run a fault-injection scenario and check it")
    i.add_argument("scenario", help="shipped scenario name or a directory with scenario.json")
    i.add_argument("--variant")
    i.set_defaults(func=cmd_inject)

    g = sub.add_parser("graph", help="emit the compartment graph as DOT")
    g.add_argument("policy")
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_graph)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"compartos: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PolicyError, BootError, AssemblyError, ModuleFormatError, ScenarioError) as exc:
        print(f"compartos: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
