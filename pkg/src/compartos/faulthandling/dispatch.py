"""Fault dispatch: find the faulting compartment, apply its strategy, log it."""

from __future__ import annotations

from ..capmachine.machine import FaultRecord
from ..loader.core import Compartment
from ..loader.policy import StrategyKind
from ..runtime import costmodel
from ..runtime.kernel import Runtime, TaskControlBlock, TaskState
from .log import FaultEntry, FaultLog
from .strategies import (
    CorruptedSaveArea,
    apply_return_error,
    kill_compartment,
    micro_reboot,
    run_custom_handler,
)


def dispatch_fault(
    runtime: Runtime, tcb: TaskControlBlock, fault: FaultRecord, log: FaultLog | None = None
) -> FaultEntry:
    system = runtime.system
    m = runtime.machine
    depth = tcb.entry_depth
    seq = log.next_seq() if log is not None else 0
    dispatch = costmodel.FAULT_DISPATCH
    m.counters.charge(dispatch, trap=True)

    def entry(comp: Compartment | None, strategy: str, outcome: str, cost: int) -> FaultEntry:
        e = FaultEntry(
            seq, tcb.name, fault.kind.value, comp.name if comp else "-", fault.pc, depth,
            strategy, outcome, cost, fault.detail,
        )
        if log is not None:
            log.append(e)
        return e

    t = system.trampoline_at(fault.pc)
    if t is not None:
        idx = t.instruction_index(fault.pc)
        if t.layout.pushed_index <= idx < t.layout.return_index:
            # the callee refused entry (killed): unwind the frame just pushed
            callee = system.compartments[t.callee]
            try:
                epilogue = apply_return_error(runtime, tcb)
            except CorruptedSaveArea:
                runtime.kill_task(tcb)
                return entry(callee, "refused", "task_dead", dispatch)
            return entry(callee, "refused", "entry_refused", dispatch + epilogue)
        if idx >= t.layout.return_index:
            runtime.kill_task(tcb)
            return entry(system.by_id(tcb.regs.cid), "none", "task_dead", dispatch)

    comp = system.by_id(fault.comp_id)
    if comp is None:
        runtime.kill_task(tcb)
        return entry(None, "none", "task_dead", dispatch)

    kind = comp.fault_strategy.kind
    strategy = kind.value
    cost = dispatch
    extra = 0
    if comp.killed:
        strategy = "killed"
    elif kind is StrategyKind.CUSTOM:
        ok, spent = run_custom_handler(runtime, tcb, comp, fault)
        cost += spent
        if not ok:
            strategy = "custom>kill"
            extra += kill_compartment(system, comp, runtime)
    elif kind is StrategyKind.KILL:
        extra += kill_compartment(system, comp, runtime)
    elif kind is StrategyKind.MICRO_REBOOT:
        extra += micro_reboot(system, comp)
    m.counters.charge(extra, trap=True)
    cost += extra

    if depth == 0:
        runtime.kill_task(tcb)
        return entry(comp, strategy, "task_dead", cost)
    try:
        cost += apply_return_error(runtime, tcb)
    except CorruptedSaveArea:
        if not comp.killed:
            m.counters.charge(kill_compartment(system, comp, runtime), trap=True)
        runtime.kill_task(tcb)
        return entry(comp, f"{strategy}>kill", "task_dead", cost)
    tcb.state = TaskState.RUNNING
    return entry(comp, strategy, "returned_error", cost)


class FaultManager:
    """Installs itself as the runtime's fault hook and keeps the log."""

    def __init__(self, runtime: Runtime):
        self.runtime = runtime
        self.log = FaultLog()
        runtime.fault_hook = self._hook

    def _hook(self, runtime: Runtime, tcb: TaskControlBlock, fault: FaultRecord) -> None:
        dispatch_fault(runtime, tcb, fault, self.log)
