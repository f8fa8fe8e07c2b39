"""Cooperative task layer: TCBs, message queues, syscalls, round-robin scheduling."""

from __future__ import annotations

import enum
from collections.abc import Callable
from dataclasses import dataclass, field, replace

from .. import abi
from ..capmachine.capability import (
    Capability,
    IllegalInstruction,
    Perm,
    Seal,
)
from ..capmachine.machine import (
    CostCounters,
    FaultRecord,
    Machine,
    RegisterFile,
    StepOutcome,
)
from ..capmachine.memory import check_access
from ..loader import trampoline as tramp
from ..loader.core import DATA_PERMS, STACK_PERMS, Compartment, LinkedSystem, Region
from ..loader.policy import SecurityPolicy
from . import costmodel

MAX_DEPTH = 16  # nested compartment entries per task


class TaskError(Exception):
    pass


class UnknownSymbol(TaskError):
    pass


class TaskState(enum.Enum):
    READY = "ready"
    RUNNING = "running"
    BLOCKED = "blocked"
    DONE = "done"
    DEAD = "dead"


@dataclass
class CompContext:
    comp_id: int
    caller_return: Capability
    caller_stack: Capability


@dataclass
class TaskControlBlock:
    task_id: int
    name: str
    home: str
    regs: RegisterFile
    stack: Region
    ctx: Region
    state: TaskState = TaskState.READY
    counters: CostCounters = field(default_factory=CostCounters)
    blocked_on: tuple[str, int] | None = None

    @property
    def entry_depth(self) -> int:
        return (self.regs.ctx.cursor - self.ctx.base) // tramp.CTX_FRAME

    @property
    def alive(self) -> bool:
        return self.state in (TaskState.READY, TaskState.RUNNING, TaskState.BLOCKED)


@dataclass
class MessageQueue:
    queue_id: int
    name: str
    capacity: int
    item_size: int
    buffer: Region
    head: int = 0
    count: int = 0
    waiters: list[int] = field(default_factory=list)

    @property
    def slot_size(self) -> int:
        return (self.item_size + 3) & ~3

    def slot(self, index: int) -> int:
        return self.buffer.base + (index % self.capacity) * self.slot_size


@dataclass(frozen=True)
class OutputRecord:
    task: str
    channel: int
    value: int
    instructions: int  # the emitting task's own count at the time


@dataclass(frozen=True)
class Mark:
    task: str
    label: int
    counters: CostCounters


@dataclass
class RunReport:
    outcome: str  # completed | deadlock | budget_exhausted
    steps: int
    tasks: dict[str, tuple[TaskState, CostCounters]]
    outputs: list[OutputRecord]

    def outputs_for(self, task: str, channel: int | None = None) -> list[int]:
        return [o.value for o in self.outputs if o.task == task and (channel is None or o.channel == channel)]

    def to_text(self) -> str:
        lines = [f"outcome={self.outcome} steps={self.steps}"]
        for name, (state, c) in self.tasks.items():
            lines.append(
                f"task={name} state={state.value} instructions={c.instructions} "
                f"trampoline={c.trampoline_instructions} trap={c.trap_instructions}"
            )
        for o in self.outputs:
            lines.append(f"out task={o.task} channel={o.channel} value={o.value:#x}")
        return "\n".join(lines)


# called with (runtime, task, fault); must leave the task RUNNING to continue it
FaultHook = Callable[["Runtime", TaskControlBlock, FaultRecord], None]


class Runtime:
    def __init__(self, system: LinkedSystem):
        self.system = system
        self.machine: Machine = system.machine
        self.tasks: dict[int, TaskControlBlock] = {}
        self.queues: list[MessageQueue] = []
        self.outputs: list[OutputRecord] = []
        self.marks: list[Mark] = []
        self.fault_hook: FaultHook | None = None
        self.current: TaskControlBlock | None = None
        self._last: TaskControlBlock | None = None
        self._rr = 0
        self._slice_start: CostCounters | None = None
        self.machine.syscall_handler = self._syscall

    @classmethod
    def from_policy(cls, system: LinkedSystem, policy: SecurityPolicy | None = None) -> Runtime:
        policy = policy or system.policy
        rt = cls(system)
        for q in policy.queues:
            rt.create_queue(q.name, q.capacity, q.item_size)
        for t in policy.tasks:
            rt.create_task(t.compartment, t.entry, t.stack_size, t.name)
        return rt

    # construction

    def create_queue(self, name: str, capacity: int, item_size: int) -> int:
        if capacity <= 0 or item_size <= 0:
            raise ValueError("queue capacity and item size must be positive")
        size = capacity * ((item_size + 3) & ~3)
        region = self.system.allocate(size, DATA_PERMS)
        q = MessageQueue(len(self.queues), name, capacity, item_size, region)
        self.queues.append(q)
        return q.queue_id

    def create_task(self, home: str | Compartment, entry_symbol: str, stack_size: int = 1024,
                    name: str | None = None) -> int:
        comp = home if isinstance(home, Compartment) else self.system.compartments.get(home)
        if comp is None:
            raise UnknownSymbol(f"no compartment {home}")
        sym = comp.image.symbol(entry_symbol)
        if sym is None or not sym.is_function:
            raise UnknownSymbol(f"{comp.name} defines no function {entry_symbol}")
        if stack_size <= 0:
            raise ValueError("stack_size must be positive")
        stack = self.system.allocate(stack_size, STACK_PERMS)
        ctx = self.system.allocate(MAX_DEPTH * tramp.CTX_FRAME, STACK_PERMS)
        regs = RegisterFile()
        regs.pcc = replace(self.system.symbol_capability(comp, sym), seal=Seal.UNSEALED)
        regs.cgp = comp.captable_cap
        regs.csp = stack.cap.with_cursor(stack.top)
        regs.cra = self.system.task_exit
        regs.ctx = ctx.cap
        regs.cid = comp.id
        task_id = len(self.tasks) + 1
        tcb = TaskControlBlock(task_id, name or f"{comp.name}.{entry_symbol}", comp.name, regs, stack, ctx)
        self.tasks[task_id] = tcb
        return task_id

    def task(self, name: str) -> TaskControlBlock:
        for t in self.tasks.values():
            if t.name == name:
                return t
        raise KeyError(name)

    # introspection

    def comp_context(self, tcb: TaskControlBlock) -> CompContext:
        mem = self.machine.memory
        if tcb.entry_depth == 0:
            return CompContext(tcb.regs.cid, tcb.regs.cra, tcb.regs.csp)
        frame = tcb.regs.ctx.cursor - tramp.CTX_FRAME
        return CompContext(
            tcb.regs.cid,
            mem.read_cap(frame + tramp.CTX_CALLER_CRA),
            mem.read_cap(frame + tramp.CTX_CALLER_CSP),
        )

    def coherent(self, tcb: TaskControlBlock) -> bool:
        """CGP names the captable of the compartment in CID (or is revoked)."""
        comp = self.system.by_id(tcb.regs.cid)
        if comp is None:
            return False
        cgp = tcb.regs.cgp
        if not cgp.tag:
            return comp.killed
        return cgp.base == comp.captable.base and cgp.length == comp.captable.size

    # kernel services

    def _syscall(self, machine: Machine, number: int) -> bool:
        tcb = self.current
        regs = machine.regs
        if tcb is None:
            raise IllegalInstruction("SYSCALL outside any task")
        if number in (abi.SYS_QUEUE_SEND, abi.SYS_QUEUE_RECV):
            qid = regs.x[0]
            if qid >= len(self.queues):
                raise IllegalInstruction(f"no queue {qid}")
            q = self.queues[qid]
            machine.counters.charge(costmodel.SYSCALL_ENTRY + costmodel.SYSCALL_EXIT)
            if number == abi.SYS_QUEUE_SEND:
                return self._send(q, tcb, regs.c[0])
            return self._recv(q, tcb, regs.c[0])
        if number == abi.SYS_OUT:
            own = tcb.counters.instructions + (machine.counters - self._slice_start).instructions
            self.outputs.append(OutputRecord(tcb.name, regs.x[0], regs.x[1], own))
            return True
        if number == abi.SYS_MARK:
            self.marks.append(Mark(tcb.name, regs.x[0], machine.counters.copy()))
            return True
        raise IllegalInstruction(f"unknown syscall {number}")

    def _buffer_address(self, cap: Capability, size: int, perm: Perm) -> int:
        if self.machine.checked:
            return check_access(cap, 0, size, perm)
        return cap.cursor

    def _send(self, q: MessageQueue, tcb: TaskControlBlock, buf: Capability) -> bool:
        addr = self._buffer_address(buf, q.item_size, Perm.LOAD)
        if q.count == q.capacity:
            self._block(q, tcb)
            return False
        mem = self.machine.memory
        mem.write(q.slot(q.head + q.count), mem.read(addr, q.item_size))
        q.count += 1
        self.machine.counters.charge(costmodel.queue_copy(q.item_size))
        self.machine.regs.x[0] = 0
        self._wake(q)
        return True

    def _recv(self, q: MessageQueue, tcb: TaskControlBlock, buf: Capability) -> bool:
        addr = self._buffer_address(buf, q.item_size, Perm.STORE)
        if q.count == 0:
            self._block(q, tcb)
            return False
        mem = self.machine.memory
        mem.write(addr, mem.read(q.slot(q.head), q.item_size))
        q.head = (q.head + 1) % q.capacity
        q.count -= 1
        self.machine.counters.charge(costmodel.queue_copy(q.item_size))
        self.machine.regs.x[0] = 0
        self._wake(q)
        return True

    def _block(self, q: MessageQueue, tcb: TaskControlBlock) -> None:
        tcb.blocked_on = (q.name, q.queue_id)
        if tcb.task_id not in q.waiters:
            q.waiters.append(tcb.task_id)

    def _wake(self, q: MessageQueue) -> None:
        # waiters retry their SYSCALL; whoever cannot proceed blocks again
        for tid in q.waiters:
            t = self.tasks[tid]
            if t.state is TaskState.BLOCKED:
                t.state = TaskState.READY
                t.blocked_on = None
        q.waiters.clear()

    # scheduling

    def _next_ready(self) -> TaskControlBlock | None:
        order = sorted(self.tasks)
        n = len(order)
        for i in range(n):
            tid = order[(self._rr + i) % n]
            if self.tasks[tid].state is TaskState.READY:
                self._rr = (self._rr + i + 1) % n
                return self.tasks[tid]
        return None

    def _enter(self, tcb: TaskControlBlock) -> None:
        self._slice_start = self.machine.counters.copy()
        if self._last is not None and self._last is not tcb:
            self.machine.counters.charge(costmodel.CONTEXT_SWITCH)
        self.machine.regs = tcb.regs
        tcb.state = TaskState.RUNNING
        self.current = tcb

    def _leave(self, tcb: TaskControlBlock) -> None:
        tcb.counters = tcb.counters + (self.machine.counters - self._slice_start)
        self._last = tcb
        self.current = None

    def kill_task(self, tcb: TaskControlBlock) -> None:
        tcb.state = TaskState.DEAD
        for q in self.queues:
            if tcb.task_id in q.waiters:
                q.waiters.remove(tcb.task_id)

    def schedule(self, max_steps: int) -> RunReport:
        if max_steps <= 0:
            raise ValueError("max_steps must be positive")
        m = self.machine
        steps = 0
        outcome = "completed"
        while True:
            if steps >= max_steps:
                outcome = "budget_exhausted"
                break
            tcb = self._next_ready()
            if tcb is None:
                if any(t.state is TaskState.BLOCKED for t in self.tasks.values()):
                    outcome = "deadlock"
                break
            self._enter(tcb)
            while steps < max_steps:
                result = m.step()
                steps += 1
                if result is StepOutcome.TRAPPED:
                    fault, m.fault = m.fault, None
                    if self.fault_hook is None:
                        self.kill_task(tcb)
                    else:
                        self.fault_hook(self, tcb, fault)
                    if tcb.state is not TaskState.RUNNING:
                        break
                    continue
                if result is StepOutcome.HALTED:
                    tcb.state = TaskState.DONE
                    break
                if m.event == "yield":
                    tcb.state = TaskState.READY
                    break
                if m.event == "block":
                    tcb.state = TaskState.BLOCKED
                    break
            if tcb.state is TaskState.RUNNING:
                tcb.state = TaskState.READY
            self._leave(tcb)
        if outcome == "budget_exhausted" and not any(t.alive for t in self.tasks.values()):
            outcome = "completed"
        return RunReport(
            outcome,
            steps,
            {t.name: (t.state, t.counters.copy()) for t in self.tasks.values()},
            list(self.outputs),
        )
