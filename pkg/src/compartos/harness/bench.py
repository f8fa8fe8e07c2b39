"""Microbenchmarks over the shipped sender/receiver pair, in emulated instructions."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from ..capmachine.machine import CostCounters, Machine
from ..loader import (
    LinkedSystem,
    SecurityPolicy,
    link_all,
    load_compartment,
    load_policy,
)
from ..loader.policy import AllowRule
from ..modformat import assemble
from ..runtime import Runtime
from .session import Session, scenarios_root

REPORT_VERSION = 1

# mark label pairs emitted by the micro sender
PAIRS = {"fncall": (2, 3), "switch": (4, 5), "ipc": (6, 7)}
BASELINE = (0, 1)
SCALING_SIZES = (1, 18, 41)


@dataclass(frozen=True)
class Row:
    variant: str
    operation: str
    instructions: int
    trampoline_instructions: int
    trap_instructions: int


@dataclass
class BenchmarkReport:
    rows: list[Row]

    def row(self, variant: str, operation: str) -> Row:
        for r in self.rows:
            if r.variant == variant and r.operation == operation:
                return r
        raise KeyError((variant, operation))

    def to_table(self) -> str:
        head = ("variant", "operation", "instructions", "trampoline", "trap")
        body = [(r.variant, r.operation, str(r.instructions), str(r.trampoline_instructions),
                 str(r.trap_instructions)) for r in self.rows]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
        lines = [f"# benchmark report v{REPORT_VERSION}, costs in emulated instructions"]
        for row in [head, *body]:
            cells = [c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
            lines.append("  ".join(cells).rstrip())
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"version": REPORT_VERSION, "rows": [asdict(r) for r in self.rows]},
                          indent=1, sort_keys=True) + "\n"


def _delta(marks: dict[int, CostCounters], a: int, b: int) -> CostCounters:
    base = marks[BASELINE[1]] - marks[BASELINE[0]]
    return (marks[b] - marks[a]) - base


def micro_policy(bound_stack: bool = True) -> SecurityPolicy:
    policy = load_policy(scenarios_root() / "micro" / "micro.policy")
    for decl in policy.compartments:
        decl.bound_stack = bound_stack
    return policy


def measure_micro(variant: str, policy: SecurityPolicy, insecure: bool = False) -> list[Row]:
    s = Session.start(policy, insecure=insecure)
    report = s.run(100_000)
    if report.outcome != "completed":
        raise RuntimeError(f"micro benchmark did not complete: {report.outcome}")
    marks = {m.label: m.counters for m in s.runtime.marks}
    rows = []
    for op, (a, b) in PAIRS.items():
        d = _delta(marks, a, b)
        rows.append(Row(variant, op, d.instructions, d.trampoline_instructions, d.trap_instructions))
    return rows


def callee_source(n_symbols: int) -> str:
    """An interface `noop` plus n-1 data words: a captable of exactly n resources."""
    lines = [".section .text", ".interface noop", "noop:", "    CRET"]
    if n_symbols > 1:
        lines.append(".section .data")
        lines.extend(f"d{i}: .word {i}" for i in range(n_symbols - 1))
    return "\n".join(lines) + "\n"


PROBE_SOURCE = """
.section .text
.global probe_main
probe_main:
    LI x0, 0
    SYSCALL SYS_MARK
    LI x0, 1
    SYSCALL SYS_MARK
    LI x0, 2
    SYSCALL SYS_MARK
    CLC c1, cap(noop)
    CJALR c1
    LI x0, 3
    SYSCALL SYS_MARK
    HALT
"""


def measure_switch_to(n_symbols: int, bound_stack: bool = True) -> CostCounters:
    """Cost of one call into a callee whose captable holds n_symbols resources."""
    machine = Machine()
    policy = SecurityPolicy(allow_rules=[AllowRule("probe", "callee", "noop")])
    system = LinkedSystem(machine, policy)
    probe = load_compartment(system, assemble(PROBE_SOURCE, "probe"), "probe")
    load_compartment(system, assemble(callee_source(n_symbols), "callee"), "callee", bound_stack=bound_stack)
    link_all(system, policy)
    rt = Runtime(system)
    rt.create_task(probe, "probe_main")
    report = rt.schedule(10_000)
    if report.outcome != "completed":
        raise RuntimeError(f"switch probe did not complete: {report.outcome}")
    marks = {m.label: m.counters for m in rt.marks}
    return _delta(marks, 2, 3)


def run_bench(kind: str) -> BenchmarkReport:
    """`switch` gives the full fncall/switch/ipc comparison plus captable scaling."""
    if kind not in ("switch", "ipc", "fncall"):
        raise ValueError(f"unknown benchmark {kind}")
    rows = measure_micro("compartos", micro_policy(True))
    rows += measure_micro("compartos-unbounded-stack", micro_policy(False))
    if kind == "switch":
        for n in SCALING_SIZES:
            d = measure_switch_to(n)
            rows.append(Row("compartos", f"switch/callee-resources={n}", d.instructions,
                            d.trampoline_instructions, d.trap_instructions))
    else:
        rows = [r for r in rows if r.operation == kind]
    return BenchmarkReport(rows)
