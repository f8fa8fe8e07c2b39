"""Constants shared by the assembler, loader, runtime, and shipped programs."""

# value placed in x0 when a compartment call is unwound by fault handling
ERR_FAULT = 0xFFFFFFFF

HANDLER_SYMBOL = "CompartOS_FaultHandler"

# SYSCALL numbers served by the runtime kernel
SYS_QUEUE_SEND = 1
SYS_QUEUE_RECV = 2
SYS_OUT = 3
SYS_MARK = 4

SYSCALLS = {
    "SYS_QUEUE_SEND": SYS_QUEUE_SEND,
    "SYS_QUEUE_RECV": SYS_QUEUE_RECV,
    "SYS_OUT": SYS_OUT,
    "SYS_MARK": SYS_MARK,
}
