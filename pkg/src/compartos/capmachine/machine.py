"""Fetch/decode/execute loop for the capability machine."""

from __future__ import annotations

import enum
from collections.abc import Callable
from dataclasses import dataclass, field, replace

from . import isa
from .capability import (
    ADDR_MASK,
    CAP_SIZE,
    FAULT_CLASSES,
    NULL_CAP,
    BoundsViolation,
    Capability,
    CapabilityFault,
    FaultKind,
    IllegalInstruction,
    Perm,
    PermViolation,
    Seal,
    SealViolation,
    TagViolation,
    derive_and_perms,
    derive_set_bounds,
    make_root_capability,
    seal_sentry,
)
from .isa import CGP, CID, CRA, CSP, CTX, PCC, Op
from .memory import TaggedMemory, load_cap, load_word, store_cap, store_word

MASK = 0xFFFFFFFF


def signed(value: int) -> int:
    value &= MASK
    return value - (1 << 32) if value & 0x80000000 else value


@dataclass
class CostCounters:
    instructions: int = 0
    trampoline_instructions: int = 0
    trap_instructions: int = 0

    def copy(self) -> CostCounters:
        return replace(self)

    def __sub__(self, other: CostCounters) -> CostCounters:
        return CostCounters(
            self.instructions - other.instructions,
            self.trampoline_instructions - other.trampoline_instructions,
            self.trap_instructions - other.trap_instructions,
        )

    def __add__(self, other: CostCounters) -> CostCounters:
        return CostCounters(
            self.instructions + other.instructions,
            self.trampoline_instructions + other.trampoline_instructions,
            self.trap_instructions + other.trap_instructions,
        )

    def charge(self, instructions: int, trap: bool = False) -> None:
        """Account modeled (host-side) work as emulated instructions."""
        self.instructions += instructions
        if trap:
            self.trap_instructions += instructions


@dataclass
class RegisterFile:
    x: list[int] = field(default_factory=lambda: [0] * isa.NUM_XREGS)
    c: list[Capability] = field(default_factory=lambda: [NULL_CAP] * isa.NUM_CREGS)

    def copy(self) -> RegisterFile:
        return RegisterFile(list(self.x), list(self.c))

    @property
    def pcc(self) -> Capability:
        return self.c[PCC]

    @pcc.setter
    def pcc(self, cap: Capability) -> None:
        self.c[PCC] = cap

    @property
    def cgp(self) -> Capability:
        return self.c[CGP]

    @cgp.setter
    def cgp(self, cap: Capability) -> None:
        self.c[CGP] = cap

    @property
    def csp(self) -> Capability:
        return self.c[CSP]

    @csp.setter
    def csp(self, cap: Capability) -> None:
        self.c[CSP] = cap

    @property
    def cra(self) -> Capability:
        return self.c[CRA]

    @cra.setter
    def cra(self, cap: Capability) -> None:
        self.c[CRA] = cap

    @property
    def ctx(self) -> Capability:
        return self.c[CTX]

    @ctx.setter
    def ctx(self, cap: Capability) -> None:
        self.c[CTX] = cap

    @property
    def cid(self) -> int:
        return self.c[CID].cursor

    @cid.setter
    def cid(self, value: int) -> None:
        self.c[CID] = replace(NULL_CAP, cursor=value & ADDR_MASK)


@dataclass(frozen=True)
class FaultRecord:
    kind: FaultKind
    comp_id: int | None
    pc: int
    detail: str = ""

    def __str__(self) -> str:
        comp = "-" if self.comp_id is None else str(self.comp_id)
        return f"{self.kind.value} comp={comp} pc={self.pc:#x} {self.detail}"


class StepOutcome(enum.Enum):
    EXECUTED = "executed"
    TRAPPED = "trapped"
    HALTED = "halted"


class RunOutcome(enum.Enum):
    HALTED = "halted"
    TRAPPED = "trapped"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass
class RunResult:
    outcome: RunOutcome
    counters: CostCounters
    steps: int
    fault: FaultRecord | None = None


# syscall handlers return True to retire the instruction, False to block on it
SyscallHandler = Callable[["Machine", int], bool]


class Machine:
    def __init__(self, memory_size: int = 1 << 20, insecure: bool = False):
        if memory_size <= 0:
            raise ValueError("memory_size must be positive")
        self.memory = TaggedMemory(memory_size)
        self.root = make_root_capability(memory_size)
        self.regs = RegisterFile()
        self.counters = CostCounters()
        self.insecure = insecure
        # address ranges whose code may touch CTX/CID; all of them are trampolines
        self.trusted: list[tuple[int, int]] = []
        self.syscall_handler: SyscallHandler | None = None
        self.fault: FaultRecord | None = None
        self.event: str | None = None
        self.trace: list[str] | None = None

    @property
    def checked(self) -> bool:
        return not self.insecure

    def add_trusted_range(self, base: int, top: int) -> None:
        self.trusted.append((base, top))

    def in_trusted(self, cap: Capability) -> bool:
        for base, top in self.trusted:
            if base <= cap.base and cap.top <= top:
                return True
        return False

    def is_trusted_pc(self, address: int) -> bool:
        for base, top in self.trusted:
            if base <= address < top:
                return True
        return False

    # register access with the privilege rule for CTX/CID

    def _privileged(self, index: int) -> None:
        if index in isa.PRIVILEGED_CREGS and self.checked and not self.in_trusted(self.regs.pcc):
            raise PermViolation(f"{isa.CREG_NAMES[index]} is trampoline-only")

    def read_creg(self, index: int) -> Capability:
        if index >= isa.NUM_CREGS:
            raise IllegalInstruction(f"bad capability register {index}")
        self._privileged(index)
        return self.regs.c[index]

    def write_creg(self, index: int, cap: Capability) -> None:
        if index >= isa.NUM_CREGS or index == PCC:
            raise IllegalInstruction(f"capability register {index} not writable")
        self._privileged(index)
        if index == CID:
            self.regs.cid = cap.cursor
        else:
            self.regs.c[index] = cap

    def _xreg(self, index: int) -> int:
        if index >= isa.NUM_XREGS:
            raise IllegalInstruction(f"bad integer register {index}")
        return index

    # execution

    def fetch(self) -> isa.Instruction:
        pcc = self.regs.pcc
        pc = pcc.cursor
        if self.checked:
            if not pcc.tag:
                raise TagViolation("PCC untagged", address=pc)
            if pcc.sealed:
                raise SealViolation("PCC sealed", address=pc)
            if Perm.EXECUTE not in pcc.perms:
                raise PermViolation("PCC lacks EXECUTE", address=pc)
            if not pcc.contains(pc, isa.INSTR_SIZE):
                raise BoundsViolation(f"fetch at {pc:#x} outside PCC", address=pc)
        raw = self.memory.read(pc, isa.INSTR_SIZE)
        try:
            return isa.decode(raw)
        except ValueError:
            raise IllegalInstruction(f"undecodable instruction word {raw.hex()}", address=pc) from None

    def step(self) -> StepOutcome:
        self.event = None
        pc = self.regs.pcc.cursor
        try:
            ins = self.fetch()
            if self.trace is not None:
                self.trace.append(f"{pc:#08x} {ins}")
            advance = self._execute(ins, pc)
        except CapabilityFault as exc:
            self.fault = FaultRecord(exc.kind, self.regs.cid or None, pc, exc.detail or exc.kind.value)
            return StepOutcome.TRAPPED
        if advance == "halt":
            self._retire(pc)
            return StepOutcome.HALTED
        if advance == "block":
            self.event = "block"
            return StepOutcome.EXECUTED
        self._retire(pc)
        if advance == "next":
            self.regs.pcc = self.regs.pcc.with_cursor(pc + isa.INSTR_SIZE)
        return StepOutcome.EXECUTED

    def _retire(self, pc: int) -> None:
        self.counters.instructions += 1
        if self.trusted and self.is_trusted_pc(pc):
            self.counters.trampoline_instructions += 1

    def run(self, max_steps: int) -> RunResult:
        if max_steps <= 0:
            raise ValueError("max_steps must be positive")
        start = self.counters.copy()
        steps = 0
        while steps < max_steps:
            outcome = self.step()
            steps += 1
            if outcome is StepOutcome.HALTED:
                return RunResult(RunOutcome.HALTED, self.counters - start, steps)
            if outcome is StepOutcome.TRAPPED:
                return RunResult(RunOutcome.TRAPPED, self.counters - start, steps, self.fault)
        return RunResult(RunOutcome.BUDGET_EXHAUSTED, self.counters - start, steps)

    def _execute(self, ins: isa.Instruction, pc: int) -> str:
        op = ins.op
        x = self.regs.x
        chk = self.checked

        if op is Op.HALT:
            return "halt"
        if op is Op.NOP:
            return "next"
        if op is Op.LI:
            x[self._xreg(ins.rd)] = ins.imm & MASK
            return "next"
        if op in _ALU:
            a = x[self._xreg(ins.rs1)]
            b = x[self._xreg(ins.rs2)]
            x[self._xreg(ins.rd)] = _ALU[op](a, b) & MASK
            return "next"
        if op is Op.ADDI:
            x[self._xreg(ins.rd)] = (x[self._xreg(ins.rs1)] + ins.imm) & MASK
            return "next"
        if op is Op.SLLI:
            x[self._xreg(ins.rd)] = (x[self._xreg(ins.rs1)] << (ins.imm & 31)) & MASK
            return "next"
        if op is Op.SRLI:
            x[self._xreg(ins.rd)] = x[self._xreg(ins.rs1)] >> (ins.imm & 31)
            return "next"
        if op is Op.MV:
            x[self._xreg(ins.rd)] = x[self._xreg(ins.rs1)]
            return "next"
        if op in _BRANCH:
            if op is Op.J or _BRANCH[op](x[self._xreg(ins.rs1)], x[self._xreg(ins.rs2)]):
                self.regs.pcc = self.regs.pcc.with_cursor(pc + ins.imm)
                return "jumped"
            return "next"

        if op is Op.CMOVE:
            src = self.read_creg(ins.rs1)
            if ins.rs1 == PCC:
                src = src.with_cursor(pc)
            self.write_creg(ins.rd, src)
            return "next"
        if op in (Op.CINCOFFSET, Op.CINCOFFSETR, Op.CSETADDR):
            src = self.read_creg(ins.rs1)
            if chk and src.tag and src.sealed:
                raise SealViolation("cursor change on sealed capability")
            if op is Op.CINCOFFSET:
                cursor = src.cursor + ins.imm
            elif op is Op.CINCOFFSETR:
                cursor = src.cursor + signed(x[self._xreg(ins.rs2)])
            else:
                cursor = x[self._xreg(ins.rs2)]
            self.write_creg(ins.rd, replace(src, cursor=cursor & ADDR_MASK))
            return "next"
        if op in (Op.CSETBOUNDS, Op.CSETBOUNDSI):
            src = self.read_creg(ins.rs1)
            length = x[self._xreg(ins.rs2)] if op is Op.CSETBOUNDS else ins.imm
            if chk:
                cap = derive_set_bounds(src, src.cursor, length)
            else:
                cap = Capability(src.tag, src.cursor, length & ADDR_MASK, src.cursor, src.perms)
            self.write_creg(ins.rd, cap)
            return "next"
        if op is Op.CANDPERM:
            src = self.read_creg(ins.rs1)
            if chk:
                cap = derive_and_perms(src, ins.imm)
            else:
                cap = replace(src, perms=Perm(int(src.perms) & ins.imm & int(Perm.ALL)))
            self.write_creg(ins.rd, cap)
            return "next"
        if op is Op.CSEALENTRY:
            src = self.read_creg(ins.rs1)
            cap = seal_sentry(src) if chk else replace(src, seal=Seal.SENTRY)
            self.write_creg(ins.rd, cap)
            return "next"
        if op in _GETTERS:
            src = self.read_creg(ins.rs1)
            x[self._xreg(ins.rd)] = _GETTERS[op](src) & MASK
            return "next"
        if op is Op.CCLEAR:
            self.write_creg(ins.rd, NULL_CAP)
            return "next"

        if op is Op.CLC:
            cap = load_cap(self.memory, self.regs.cgp, ins.imm * CAP_SIZE, chk)
            self.write_creg(ins.rd, cap)
            return "next"
        if op is Op.CLW:
            base = self.read_creg(ins.rs1)
            x[self._xreg(ins.rd)] = load_word(self.memory, base, ins.imm, chk)
            return "next"
        if op is Op.CSW:
            base = self.read_creg(ins.rs1)
            store_word(self.memory, base, ins.imm, x[self._xreg(ins.rs2)], chk)
            return "next"
        if op is Op.CLCR:
            base = self.read_creg(ins.rs1)
            self.write_creg(ins.rd, load_cap(self.memory, base, ins.imm, chk))
            return "next"
        if op is Op.CSCR:
            base = self.read_creg(ins.rs1)
            value = self.read_creg(ins.rs2)
            store_cap(self.memory, base, ins.imm, value, chk)
            return "next"

        if op is Op.CJALR:
            self.jump(self.read_creg(ins.rs1), pc)
            return "jumped"
        if op is Op.CRET:
            self.jump(self.regs.cra, pc, link=False)
            return "jumped"

        if op is Op.TRAPIF:
            if x[self._xreg(ins.rs1)] != 0:
                kind = FaultKind.from_code(ins.imm)
                raise FAULT_CLASSES[kind](f"TRAPIF kind={kind.value}")
            return "next"
        if op is Op.YIELD:
            self.event = "yield"
            return "next"
        if op is Op.SYSCALL:
            if self.syscall_handler is None:
                raise IllegalInstruction(f"SYSCALL {ins.imm} without a kernel")
            return "next" if self.syscall_handler(self, ins.imm) else "block"

        raise IllegalInstruction(f"unimplemented opcode {op.name}")

    def jump(self, target: Capability, pc: int, link: bool = True) -> None:
        """Capability jump-and-link: unseal a sentry, link a return sentry into CRA."""
        if self.checked:
            if not target.tag:
                raise TagViolation("jump through untagged capability", address=target.cursor)
            if Perm.EXECUTE not in target.perms:
                raise PermViolation("jump target lacks EXECUTE", address=target.cursor)
            if not target.contains(target.cursor, isa.INSTR_SIZE):
                raise BoundsViolation("jump target outside bounds", address=target.cursor)
        if link:
            self.regs.cra = replace(self.regs.pcc, cursor=(pc + isa.INSTR_SIZE) & ADDR_MASK, seal=Seal.SENTRY)
        self.regs.pcc = replace(target, seal=Seal.UNSEALED)


_ALU = {
    Op.ADD: lambda a, b: a + b,
    Op.SUB: lambda a, b: a - b,
    Op.AND: lambda a, b: a & b,
    Op.OR: lambda a, b: a | b,
    Op.XOR: lambda a, b: a ^ b,
    Op.MUL: lambda a, b: a * b,
}

_BRANCH = {
    Op.BEQ: lambda a, b: a == b,
    Op.BNE: lambda a, b: a != b,
    Op.BLT: lambda a, b: signed(a) < signed(b),
    Op.BGE: lambda a, b: signed(a) >= signed(b),
    Op.J: None,
}

_GETTERS = {
    Op.CGETADDR: lambda c: c.cursor,
    Op.CGETBASE: lambda c: c.base,
    Op.CGETLEN: lambda c: c.length,
    Op.CGETTAG: lambda c: int(c.tag),
    Op.CGETPERM: lambda c: int(c.perms),
}
