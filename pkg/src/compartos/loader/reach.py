"""Capability-graph closure and the isolation checks built on it.

The closure starts from a set of capabilities (a captable, live registers) and
follows every unsealed capability with LOAD_CAP into the tagged granules it
covers. Sentries are opaque: they can only be jumped through, so their targets
are not expanded.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

from ..capmachine.capability import CAP_SIZE, Capability, Perm
from .core import Compartment, LinkedSystem


def closure(system: LinkedSystem, roots: Iterable[Capability]) -> set[Capability]:
    mem = system.machine.memory
    seen: set[Capability] = set()
    expanded: set[tuple[int, int]] = set()
    work = [c for c in roots if c.tag]
    while work:
        cap = work.pop()
        if cap in seen:
            continue
        seen.add(cap)
        if cap.sealed or Perm.LOAD_CAP not in cap.perms:
            continue
        span = (cap.base, cap.top)
        if span in expanded:
            continue
        expanded.add(span)
        for addr in mem.tagged_granules(cap.base, cap.top):
            if addr + CAP_SIZE <= cap.top and addr >= cap.base:
                work.append(mem.read_cap(addr))
    return seen


def compartment_roots(system: LinkedSystem, comp: Compartment) -> list[Capability]:
    roots = [comp.captable_cap]
    if comp.handler_stack is not None:
        roots.append(comp.handler_stack.cap)
    return roots


@dataclass(frozen=True)
class Violation:
    compartment: str
    kind: str
    cap: Capability
    other: str = ""

    def __str__(self) -> str:
        return f"{self.compartment}: {self.kind} {self.other} {self.cap}".rstrip()


def _overlaps(cap: Capability, base: int, top: int) -> bool:
    return cap.length > 0 and cap.base < top and base < cap.top


def isolation_violations(
    system: LinkedSystem, comp: Compartment, extra_roots: Iterable[Capability] = ()
) -> list[Violation]:
    """Everything in comp's closure that breaks isolation from the others."""
    caps = closure(system, [*compartment_roots(system, comp), *extra_roots])
    root = system.root
    tramp_ranges = [(t.region.base, t.region.top) for t in system.trampolines]
    out: list[Violation] = []
    for cap in sorted(caps, key=lambda c: (c.base, c.length, c.cursor, int(c.perms), c.seal.value)):
        if cap.base <= root.base and cap.top >= root.top:
            out.append(Violation(comp.name, "root", cap))
            continue
        for other in system.compartments.values():
            if other is comp:
                continue
            for sec, region in other.regions.items():
                if _overlaps(cap, region.base, region.top):
                    if cap.perms & (Perm.STORE | Perm.STORE_CAP):
                        out.append(Violation(comp.name, "foreign-writable", cap, f"{other.name}{sec}"))
                    elif Perm.EXECUTE in cap.perms:
                        out.append(Violation(comp.name, "foreign-code", cap, f"{other.name}{sec}"))
            if _overlaps(cap, other.captable.base, other.captable.top):
                out.append(Violation(comp.name, "foreign-captable", cap, other.name))
        for base, top in tramp_ranges:
            if _overlaps(cap, base, top) and not cap.sealed:
                out.append(Violation(comp.name, "unsealed-trampoline", cap))
    return out


def system_violations(system: LinkedSystem) -> list[Violation]:
    out: list[Violation] = []
    for comp in system.compartments.values():
        out.extend(isolation_violations(system, comp))
    return out


def edges(system: LinkedSystem, comp: Compartment) -> set[Capability]:
    """Reachable capabilities, the graph-diff view used around kill."""
    return closure(system, compartment_roots(system, comp))
