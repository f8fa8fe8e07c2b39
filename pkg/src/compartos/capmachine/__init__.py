"""Tagged-capability machine: capabilities, tagged memory, toy ISA interpreter."""

from .capability import (
    CAP_SIZE,
    NULL_CAP,
    BoundsViolation,
    Capability,
    CapabilityFault,
    FaultKind,
    IllegalInstruction,
    MonotonicityViolation,
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
from .isa import CGP, CID, CRA, CSP, CTX, INSTR_SIZE, PCC, Instruction, Op, encode
from .machine import (
    CostCounters,
    FaultRecord,
    Machine,
    RegisterFile,
    RunOutcome,
    RunResult,
    StepOutcome,
)
from .memory import (
    TaggedMemory,
    check_access,
    load_cap,
    load_word,
    store_cap,
    store_word,
)

__all__ = [name for name in dir() if not name.startswith("_")]
