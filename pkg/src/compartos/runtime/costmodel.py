"""Modeled instruction costs for host-side kernel work.

Kernel services run on the host, not as emulated code, so their cost is
charged to the machine counters from this table. The figures follow one
rule: every entry or exit of the kernel saves or restores the register file,
one instruction per word.
"""

from ..capmachine import isa

# integer registers plus capability registers, one store (or load) each
REGFILE_WORDS = isa.NUM_XREGS + isa.NUM_CREGS

SYSCALL_ENTRY = REGFILE_WORDS
SYSCALL_EXIT = REGFILE_WORDS
QUEUE_BOOKKEEPING = 10  # bounds check, index update, waiter scan
QUEUE_COPY_PER_WORD = 2  # one load, one store
SCHEDULER_PICK = 6
CONTEXT_SWITCH = 2 * REGFILE_WORDS + SCHEDULER_PICK

# fault dispatch: trap entry saves the register file, then the handler looks
# up the task, its compartment, and the strategy
FAULT_DISPATCH = REGFILE_WORDS + 8
RESTORE_PER_WORD = 1
REDERIVE_PER_SLOT = 2  # set-bounds plus store
KILL_PER_TRAMPOLINE = 1


def queue_copy(item_size: int) -> int:
    words = (item_size + 3) // 4
    return QUEUE_BOOKKEEPING + QUEUE_COPY_PER_WORD * words
