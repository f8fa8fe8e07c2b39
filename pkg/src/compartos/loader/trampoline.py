"""Compartment-switch trampoline code generation.

A trampoline region is three capability-sized metadata cells followed by code::

    +0   .Lfunc      callee function capability (sentry)
    +16  .Lcaptable  callee captable capability
    +32  .Lcompid    callee compartment id (untagged cell, id in the address field)
    +48  code

The caller's register file, CGP and compartment id are saved in a frame on the
caller stack. The caller stack pointer, caller return capability and the
trampoline's own return point are pushed on the task's context stack (CTX),
which only trampoline code can reach.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..capmachine.capability import CAP_SIZE
from ..capmachine.isa import CGP, CID, CRA, CSP, CTX, INSTR_SIZE, PCC, Op, encode

META_FUNC = 0
META_CAPTABLE = 16
META_COMPID = 32
META_SIZE = 48
CODE_OFFSET = META_SIZE

# caller save frame, on the caller stack
FRAME_CREGS = 0  # c0..c7
FRAME_CGP = 128
FRAME_CID = 144
FRAME_XREGS = 160  # x0..x7
FRAME_SIZE = 192

# context-stack frame, on the task's CTX region
CTX_CALLER_CSP = 0
CTX_CALLER_CRA = 16
CTX_RETURN = 32
CTX_FRAME = 48


@dataclass(frozen=True)
class TrampolineLayout:
    code: bytes
    n_instructions: int
    enter_count: int  # instructions from entry up to and including the callee jump
    return_index: int  # first instruction of the return path
    return_count: int  # instructions from return point through CRET
    pushed_index: int  # first instruction executed with the context frame pushed
    probe_index: int  # captable liveness probe

    @property
    def clean_cost(self) -> int:
        """Instructions of one switch round trip when no stack scrubbing loop runs."""
        return self.enter_count + self.return_count


def generate(bound_stack: bool = True, scrub_stack: bool = False) -> TrampolineLayout:
    code: list[tuple] = []

    def emit(op, rd=0, rs1=0, rs2=0, imm=0):
        code.append((op, rd, rs1, rs2, imm))
        return len(code) - 1

    def meta(slot: int, at: int) -> int:
        # PCC-relative offset from the CMOVE-from-PCC at index `at`
        return slot - (CODE_OFFSET + at * INSTR_SIZE)

    # save caller context on its stack
    emit(Op.CINCOFFSET, CSP, CSP, 0, -FRAME_SIZE)
    for i in range(8):
        emit(Op.CSCR, 0, CSP, i, FRAME_CREGS + i * CAP_SIZE)
    emit(Op.CSCR, 0, CSP, CGP, FRAME_CGP)
    emit(Op.CMOVE, 4, CID)
    emit(Op.CSCR, 0, CSP, 4, FRAME_CID)
    for i in range(8):
        emit(Op.CSW, 0, CSP, i, FRAME_XREGS + i * 4)
    # push caller stack, caller return, and our return point on the context stack
    emit(Op.CMOVE, 4, CTX)
    emit(Op.CSCR, 0, 4, CSP, CTX_CALLER_CSP)
    emit(Op.CSCR, 0, 4, CRA, CTX_CALLER_CRA)
    ret_fixup = emit(Op.CMOVE, 5, PCC)
    emit(Op.CINCOFFSET, 5, 5, 0, 0)  # patched below
    emit(Op.CSEALENTRY, 5, 5)
    emit(Op.CSCR, 0, 4, 5, CTX_RETURN)
    emit(Op.CINCOFFSET, 4, 4, 0, CTX_FRAME)
    emit(Op.CMOVE, CTX, 4)
    pushed = len(code)
    # install the callee's captable and identity
    at = emit(Op.CMOVE, 4, PCC)
    emit(Op.CLCR, 5, 4, 0, meta(META_CAPTABLE, at))
    probe = emit(Op.CLW, 7, 5, 0, 0)
    emit(Op.CLCR, 6, 4, 0, meta(META_FUNC, at))
    emit(Op.CLCR, 7, 4, 0, meta(META_COMPID, at))
    emit(Op.CMOVE, CGP, 5)
    emit(Op.CMOVE, CID, 7)
    if bound_stack or scrub_stack:
        emit(Op.CGETBASE, 5, CSP)
        emit(Op.CGETADDR, 6, CSP)
        emit(Op.SUB, 6, 6, 5)
    if bound_stack:
        # donate only the unused part below the save frame
        emit(Op.CSETADDR, CSP, CSP, 5)
        emit(Op.CSETBOUNDS, CSP, CSP, 6)
        emit(Op.CINCOFFSETR, CSP, CSP, 6)
    if scrub_stack:
        emit(Op.CSETADDR, 7, CSP, 5)
        emit(Op.LI, 5, 0, 0, 4)
        emit(Op.LI, 4, 0, 0, 0)
        loop = emit(Op.BLT, 0, 6, 5, 0)  # patched below
        emit(Op.CSW, 0, 7, 4, 0)
        emit(Op.CINCOFFSET, 7, 7, 0, 4)
        emit(Op.ADDI, 6, 6, 0, -4)
        jback = emit(Op.J)
        code[jback] = (Op.J, 0, 0, 0, (loop - jback) * INSTR_SIZE)
        done = len(code)
        code[loop] = (Op.BLT, 0, 6, 5, (done - loop) * INSTR_SIZE)
        emit(Op.LI, 4, 0, 0, 0)
    # leave nothing of ours in the callee's registers
    emit(Op.CCLEAR, 4)
    emit(Op.CCLEAR, 5)
    emit(Op.CCLEAR, 7)
    emit(Op.LI, 5, 0, 0, 0)
    emit(Op.LI, 6, 0, 0, 0)
    emit(Op.LI, 7, 0, 0, 0)
    call = emit(Op.CJALR, 0, 6)
    ret = len(code)
    code[ret_fixup + 1] = (Op.CINCOFFSET, 5, 5, 0, (ret - ret_fixup) * INSTR_SIZE)
    # return path: pop the context frame and restore the caller
    emit(Op.CMOVE, 4, CTX)
    emit(Op.CINCOFFSET, 4, 4, 0, -CTX_FRAME)
    emit(Op.CMOVE, CTX, 4)
    emit(Op.CLCR, CSP, 4, 0, CTX_CALLER_CSP)
    emit(Op.CLCR, CRA, 4, 0, CTX_CALLER_CRA)
    emit(Op.CLCR, 5, CSP, 0, FRAME_CID)
    emit(Op.CMOVE, CID, 5)
    emit(Op.CLCR, CGP, CSP, 0, FRAME_CGP)
    for i in range(1, 8):
        emit(Op.CLCR, i, CSP, 0, FRAME_CREGS + i * CAP_SIZE)
    for i in range(1, 8):
        emit(Op.CLW, i, CSP, 0, FRAME_XREGS + i * 4)
    emit(Op.CINCOFFSET, CSP, CSP, 0, FRAME_SIZE)
    emit(Op.CRET)

    blob = b"".join(encode(*ins) for ins in code)
    enter = call + 1
    if scrub_stack:
        # the four loop-body instructions run once per scrubbed word
        enter -= 4
    return TrampolineLayout(
        code=blob,
        n_instructions=len(code),
        enter_count=enter,
        return_index=ret,
        return_count=len(code) - ret,
        pushed_index=pushed,
        probe_index=probe,
    )
