"""Fault dispatch and the recovery strategies."""

from ..loader.core import register_handlers
from ..loader.policy import FaultStrategy, StrategyKind
from .dispatch import FaultManager, dispatch_fault
from .log import HEADER, LOG_VERSION, FaultEntry, FaultLog, FaultLogFormatError
from .strategies import (
    HANDLER_BUDGET,
    CorruptedSaveArea,
    apply_return_error,
    full_reboot_cost,
    kill_compartment,
    micro_reboot,
    run_custom_handler,
)

__all__ = [name for name in dir() if not name.startswith("_")]
