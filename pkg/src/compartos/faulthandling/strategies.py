"""Recovery primitives: unwind one entry, kill, micro-reboot, run a custom handler.

None of these widen a capability. Kill only clears tags; micro-reboot rewrites
data bytes and re-derives slots from the loader's own section capabilities.
"""

from __future__ import annotations

from dataclasses import replace

from .. import abi
from ..capmachine.capability import NULL_CAP, Seal
from ..capmachine.machine import FaultRecord, RegisterFile, StepOutcome
from ..loader import trampoline as tramp
from ..loader.core import Compartment, LinkedSystem, SlotClass
from ..runtime import costmodel
from ..runtime.kernel import Runtime, TaskControlBlock

HANDLER_BUDGET = 10_000


class CorruptedSaveArea(Exception):
    pass


def apply_return_error(runtime: Runtime, tcb: TaskControlBlock) -> int:
    """Unwind the innermost compartment entry of `tcb` and resume its caller.

    The caller gets x0 = ERR_FAULT and c0 = NULL; everything else comes back
    from the trampoline's save area through the trampoline's own return path.
    Returns the epilogue length that will run.
    """
    if tcb.entry_depth < 1:
        raise ValueError("no compartment entry to unwind")
    mem = runtime.machine.memory
    regs = tcb.regs
    frame = regs.ctx.cursor - tramp.CTX_FRAME
    caller_csp = mem.read_cap(frame + tramp.CTX_CALLER_CSP)
    ret = mem.read_cap(frame + tramp.CTX_RETURN)
    if not (caller_csp.tag and ret.tag):
        raise CorruptedSaveArea("context frame lost its tags")
    cgp_cell = caller_csp.cursor + tramp.FRAME_CGP
    if cgp_cell + 16 > mem.size or not mem.tag_at(cgp_cell):
        raise CorruptedSaveArea("saved CGP in the caller frame is untagged")
    t = runtime.system.trampoline_at(ret.cursor)
    regs.x[0] = abi.ERR_FAULT
    regs.c[0] = NULL_CAP
    regs.pcc = replace(ret, seal=Seal.UNSEALED)
    return t.layout.return_count if t else 0


def kill_compartment(system: LinkedSystem, comp: Compartment, runtime: Runtime | None = None) -> int:
    """Revoke every way into `comp`; returns the modeled cost."""
    mem = system.machine.memory
    comp.killed = True
    cost = 0
    for t in system.trampolines:
        if t.callee == comp.name:
            mem.clear_tag(t.region.base + tramp.META_CAPTABLE)
            cost += costmodel.KILL_PER_TRAMPOLINE
    if runtime is not None:
        # suspended tasks sitting inside the compartment lose their CGP too
        for tcb in runtime.tasks.values():
            if tcb.regs.cid == comp.id and tcb.regs.cgp.tag:
                tcb.regs.cgp = tcb.regs.cgp.cleared()
                cost += 1
    return cost


def _data_slots(comp: Compartment) -> list:
    out = []
    for name, slot in comp.slots.items():
        if slot.cls is SlotClass.EXTERNAL:
            continue
        sym = comp.image.symbol(name)
        if not sym.is_function:
            out.append((slot, sym))
    return out


def micro_reboot(system: LinkedSystem, comp: Compartment) -> int:
    """Roll .data/.bss back to the load-time snapshot; returns the modeled cost."""
    mem = system.machine.memory
    words = 0
    for sec in comp.mutable_sections:
        region = comp.regions[sec]
        mem.write(region.base, comp.snapshot[sec])
        words += (region.size + 3) // 4
    slots = _data_slots(comp)
    for slot, sym in slots:
        mem.write_cap(comp.slot_address(slot.index), system.symbol_capability(comp, sym))
    retagged = 0
    for t in system.trampolines:
        if t.callee == comp.name:
            mem.write_cap(t.region.base + tramp.META_CAPTABLE, comp.captable_cap)
            retagged += 1
    comp.killed = False
    return (
        words * costmodel.RESTORE_PER_WORD
        + len(slots) * costmodel.REDERIVE_PER_SLOT
        + retagged * costmodel.KILL_PER_TRAMPOLINE
    )


def full_reboot_cost(system: LinkedSystem) -> int:
    """Words the loader wrote to bring the whole system up: the cost of starting over."""
    return system.boot_cost


def run_custom_handler(
    runtime: Runtime, tcb: TaskControlBlock, comp: Compartment, fault: FaultRecord
) -> tuple[bool, int]:
    """Run the compartment's handler on its own stack; (returned cleanly, instructions)."""
    system = runtime.system
    m = runtime.machine
    sym = comp.image.symbol(comp.fault_strategy.handler or abi.HANDLER_SYMBOL)
    if sym is None or comp.handler_stack is None:
        return False, 0
    saved = m.regs
    h = RegisterFile()
    h.pcc = replace(system.symbol_capability(comp, sym), seal=Seal.UNSEALED)
    h.cgp = comp.captable_cap
    h.csp = comp.handler_stack.cap.with_cursor(comp.handler_stack.top)
    h.cra = system.handler_return
    h.ctx = saved.ctx
    h.cid = comp.id
    h.x[0] = fault.kind.code
    h.x[1] = fault.pc
    m.regs = h
    start = m.counters.instructions
    ok = False
    try:
        for _ in range(HANDLER_BUDGET):
            out = m.step()
            if out is StepOutcome.TRAPPED:
                m.fault = None
                break
            if out is StepOutcome.HALTED:
                ok = h.pcc.cursor == system.handler_return.cursor
                break
            if m.event == "block":
                break
    finally:
        m.regs = saved
    spent = m.counters.instructions - start
    m.counters.trap_instructions += spent
    return ok, spent
