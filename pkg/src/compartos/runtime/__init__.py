"""Cooperative task runtime: tasks, queues, syscalls, scheduling."""

from . import costmodel
from .kernel import (
    MAX_DEPTH,
    CompContext,
    Mark,
    MessageQueue,
    OutputRecord,
    RunReport,
    Runtime,
    TaskControlBlock,
    TaskError,
    TaskState,
    UnknownSymbol,
)

__all__ = [name for name in dir() if not name.startswith("_")]
