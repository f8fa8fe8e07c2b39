"""Compartment graph of a linked system, as text or DOT."""

from __future__ import annotations

from ..loader import LinkedSystem


def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def call_edges(system: LinkedSystem) -> list[tuple[str, str, str]]:
    """(caller, callee, symbol) for every trampoline, sorted."""
    out = {(t.caller or "-", t.callee, t.symbol) for t in system.trampolines}
    return sorted(out)


def denied_edges(system: LinkedSystem) -> list[tuple[str, str, str, str]]:
    return sorted(
        {(d.caller, d.callee or "?", d.symbol, d.code) for d in system.diagnostics}
    )


def to_text(system: LinkedSystem) -> str:
    lines = []
    for c in sorted(system.compartments.values(), key=lambda c: c.id):
        lines.append(
            f"compartment {c.name} id={c.id} strategy={c.fault_strategy} slots={c.n_slots} "
            f"bound_stack={'yes' if c.bound_stack else 'no'}"
        )
    for caller, callee, sym in call_edges(system):
        lines.append(f"call {caller} -> {callee} : {sym}")
    for d in sorted(system.diagnostics, key=str):
        lines.append(f"diagnostic {d}")
    return "\n".join(lines) + "\n"


def to_dot(system: LinkedSystem) -> str:
    lines = ["digraph compartments {", "  rankdir=LR;", "  node [shape=box];"]
    for c in sorted(system.compartments.values(), key=lambda c: c.name):
        label = f"{c.name}\\nstrategy={c.fault_strategy}\\nslots={c.n_slots}"
        lines.append(f"  {_q(c.name)} [label=\"{label}\"];")
    for caller, callee, sym in call_edges(system):
        lines.append(f"  {_q(caller)} -> {_q(callee)} [label={_q(sym)}];")
    for caller, callee, sym, code in denied_edges(system):
        lines.append(f"  {_q(caller)} -> {_q(callee)} [label={_q(sym + ' (' + code + ')')}, style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"
