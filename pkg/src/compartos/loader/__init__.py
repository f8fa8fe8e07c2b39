"""Secure loader/linker: policy, compartments, captables, trampolines."""

from . import trampoline
from .core import (
    CAPTABLE_PERMS,
    CODE_PERMS,
    DATA_PERMS,
    HANDLER_STACK_SIZE,
    RODATA_PERMS,
    STACK_PERMS,
    TRAMPOLINE_PERMS,
    BootError,
    Compartment,
    DuplicateCompartmentName,
    LinkDiagnostic,
    LinkedSystem,
    LinkError,
    LoaderError,
    OutOfMemory,
    Region,
    Slot,
    SlotClass,
    Trampoline,
    UnresolvedRequiredSymbol,
    ValidationFailed,
    boot,
    emit_trampoline,
    iter_compartment_caps,
    link_all,
    load_compartment,
    merge_images,
    read_module,
    register_handlers,
    wrap_function_pointer,
)
from .policy import (
    AllowRule,
    CompartmentDecl,
    FaultStrategy,
    PolicyError,
    QueueDecl,
    SecurityPolicy,
    StrategyKind,
    TaskDecl,
    load_policy,
    parse_policy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
