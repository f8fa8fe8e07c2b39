"""Toy capability ISA: opcode table and the 8-byte instruction encoding.

Layout (little-endian): opcode u8, rd u8, rs1 u8, rs2 u8, imm i32.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

INSTR_SIZE = 8
_INSTR = struct.Struct("<BBBBi")

NUM_XREGS = 8
NUM_GENERAL_CREGS = 8

# capability register indices
CGP = 8
CSP = 9
CRA = 10
PCC = 11
CTX = 12  # per-task compartment context stack, trampoline-only
CID = 13  # current compartment id, trampoline-only
NUM_CREGS = 14

CREG_NAMES = {i: f"c{i}" for i in range(NUM_GENERAL_CREGS)}
CREG_NAMES.update({CGP: "cgp", CSP: "csp", CRA: "cra", PCC: "pcc", CTX: "ctx", CID: "cid"})
CREG_BY_NAME = {v: k for k, v in CREG_NAMES.items()}
PRIVILEGED_CREGS = frozenset({CTX, CID})


class Op(enum.IntEnum):
    HALT = 0x00
    NOP = 0x01
    LI = 0x02
    ADD = 0x03
    SUB = 0x04
    ADDI = 0x05
    AND = 0x06
    OR = 0x07
    XOR = 0x08
    MUL = 0x09
    SLLI = 0x0A
    SRLI = 0x0B
    MV = 0x0C
    BEQ = 0x10
    BNE = 0x11
    BLT = 0x12
    BGE = 0x13
    J = 0x14
    CMOVE = 0x20
    CINCOFFSET = 0x21
    CINCOFFSETR = 0x22
    CSETBOUNDS = 0x23
    CSETBOUNDSI = 0x24
    CANDPERM = 0x25
    CSEALENTRY = 0x26
    CSETADDR = 0x27
    CGETADDR = 0x28
    CGETBASE = 0x29
    CGETLEN = 0x2A
    CGETTAG = 0x2B
    CGETPERM = 0x2C
    CCLEAR = 0x2D
    CLC = 0x30
    CLW = 0x31
    CSW = 0x32
    CLCR = 0x33
    CSCR = 0x34
    CJALR = 0x40
    CRET = 0x41
    TRAPIF = 0x50
    YIELD = 0x51
    SYSCALL = 0x52


# operand shapes, used by the assembler and disassembler
#   x: integer register, c: capability register, i: immediate, l: branch label,
#   m: imm(creg) memory operand, g: captable slot (CLC)
SHAPES: dict[Op, tuple[str, ...]] = {
    Op.HALT: (),
    Op.NOP: (),
    Op.LI: ("xd", "i"),
    Op.ADD: ("xd", "x1", "x2"),
    Op.SUB: ("xd", "x1", "x2"),
    Op.ADDI: ("xd", "x1", "i"),
    Op.AND: ("xd", "x1", "x2"),
    Op.OR: ("xd", "x1", "x2"),
    Op.XOR: ("xd", "x1", "x2"),
    Op.MUL: ("xd", "x1", "x2"),
    Op.SLLI: ("xd", "x1", "i"),
    Op.SRLI: ("xd", "x1", "i"),
    Op.MV: ("xd", "x1"),
    Op.BEQ: ("x1", "x2", "l"),
    Op.BNE: ("x1", "x2", "l"),
    Op.BLT: ("x1", "x2", "l"),
    Op.BGE: ("x1", "x2", "l"),
    Op.J: ("l",),
    Op.CMOVE: ("cd", "c1"),
    Op.CINCOFFSET: ("cd", "c1", "i"),
    Op.CINCOFFSETR: ("cd", "c1", "x2"),
    Op.CSETBOUNDS: ("cd", "c1", "x2"),
    Op.CSETBOUNDSI: ("cd", "c1", "i"),
    Op.CANDPERM: ("cd", "c1", "i"),
    Op.CSEALENTRY: ("cd", "c1"),
    Op.CSETADDR: ("cd", "c1", "x2"),
    Op.CGETADDR: ("xd", "c1"),
    Op.CGETBASE: ("xd", "c1"),
    Op.CGETLEN: ("xd", "c1"),
    Op.CGETTAG: ("xd", "c1"),
    Op.CGETPERM: ("xd", "c1"),
    Op.CCLEAR: ("cd",),
    Op.CLC: ("cd", "g"),
    Op.CLW: ("xd", "m"),
    Op.CSW: ("x2", "m"),
    Op.CLCR: ("cd", "m"),
    Op.CSCR: ("c2", "m"),
    Op.CJALR: ("c1",),
    Op.CRET: (),
    Op.TRAPIF: ("x1", "i"),
    Op.YIELD: (),
    Op.SYSCALL: ("i",),
}


@dataclass(frozen=True)
class Instruction:
    op: Op
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0

    def encode(self) -> bytes:
        return _INSTR.pack(int(self.op), self.rd, self.rs1, self.rs2, self.imm)

    def __str__(self) -> str:
        return disassemble(self)


def encode(op: Op, rd: int = 0, rs1: int = 0, rs2: int = 0, imm: int = 0) -> bytes:
    return _INSTR.pack(int(op), rd, rs1, rs2, imm)


def decode(raw: bytes) -> Instruction:
    """Decode one instruction word; raises ValueError on an unknown opcode."""
    opcode, rd, rs1, rs2, imm = _INSTR.unpack(raw)
    return Instruction(Op(opcode), rd, rs1, rs2, imm)


def disassemble(ins: Instruction) -> str:
    parts = []
    for shape in SHAPES[ins.op]:
        if shape == "xd":
            parts.append(f"x{ins.rd}")
        elif shape == "x1":
            parts.append(f"x{ins.rs1}")
        elif shape == "x2":
            parts.append(f"x{ins.rs2}")
        elif shape == "cd":
            parts.append(CREG_NAMES.get(ins.rd, f"c?{ins.rd}"))
        elif shape == "c1":
            parts.append(CREG_NAMES.get(ins.rs1, f"c?{ins.rs1}"))
        elif shape == "c2":
            parts.append(CREG_NAMES.get(ins.rs2, f"c?{ins.rs2}"))
        elif shape in ("i", "l"):
            parts.append(str(ins.imm))
        elif shape == "m":
            parts.append(f"{ins.imm}({CREG_NAMES.get(ins.rs1, '?')})")
        elif shape == "g":
            parts.append(f"{ins.imm}(cgp)")
    name = ins.op.name
    return f"{name} {', '.join(parts)}" if parts else name
