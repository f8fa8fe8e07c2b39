from __future__ import annotations

import pytest
from conftest import build

from compartos.runtime import TaskState, UnknownSymbol, costmodel

PRODUCER = """
.section .text
.global produce
produce:
    LI x3, 0
.Lnext:
    CLC c0, cap(item)
    CSW x3, 0(c0)
    LI x0, 0
    SYSCALL SYS_QUEUE_SEND
    ADDI x3, x3, 1
    LI x4, 4
    BNE x3, x4, .Lnext
    HALT
.section .data
item: .word 0
"""

CONSUMER = """
.section .text
.global consume
consume:
    LI x3, 0
.Lnext:
    LI x0, 0
    CLC c0, cap(slot)
    SYSCALL SYS_QUEUE_RECV
    CLC c0, cap(slot)
    CLW x1, 0(c0)
    LI x0, 2
    SYSCALL SYS_OUT
    ADDI x3, x3, 1
    LI x4, 4
    BNE x3, x4, .Lnext
    HALT
.section .data
slot: .word 0
"""

YIELDER = """
.section .text
.global loop_a
.global loop_b
loop_a:
    LI x1, 1
    LI x0, 0
    SYSCALL SYS_OUT
    YIELD
    LI x1, 2
    SYSCALL SYS_OUT
    HALT
loop_b:
    LI x1, 10
    LI x0, 0
    SYSCALL SYS_OUT
    YIELD
    LI x1, 20
    SYSCALL SYS_OUT
    HALT
"""


def _pc(**kw):
    b = build({"p": PRODUCER, "c": CONSUMER}, **kw)
    b.runtime.create_queue("q", 2, 4)
    return b


def test_queue_transfers_in_order_across_blocking():
    b = _pc()
    b.runtime.create_task("c", "consume", name="cons")
    b.runtime.create_task("p", "produce", name="prod")
    report = b.runtime.schedule(10_000)
    assert report.outcome == "completed"
    assert report.outputs_for("cons", 2) == [0, 1, 2, 3]
    assert all(state is TaskState.DONE for state, _ in report.tasks.values())


def test_recv_without_sender_deadlocks():
    b = _pc()
    b.runtime.create_task("c", "consume", name="cons")
    report = b.runtime.schedule(10_000)
    assert report.outcome == "deadlock"
    assert b.runtime.task("cons").state is TaskState.BLOCKED
    assert b.runtime.task("cons").blocked_on == ("q", 0)


def test_blocked_syscall_does_not_retire():
    b = _pc()
    b.runtime.create_task("c", "consume", name="cons")
    report = b.runtime.schedule(10_000)
    # LI, LI, CLC retire; the blocking SYSCALL does not (syscall cost is charged)
    _, c = report.tasks["cons"]
    assert c.instructions == 3 + costmodel.SYSCALL_ENTRY + costmodel.SYSCALL_EXIT


def test_yield_round_robin():
    b = build({"y": YIELDER})
    b.runtime.create_task("y", "loop_a", name="a")
    b.runtime.create_task("y", "loop_b", name="b")
    report = b.runtime.schedule(1000)
    assert [(o.task, o.value) for o in report.outputs] == [("a", 1), ("b", 10), ("a", 2), ("b", 20)]


def test_context_switch_cost_charged_only_on_change():
    b = build({"y": YIELDER})
    b.runtime.create_task("y", "loop_a", name="a")
    report = b.runtime.schedule(1000)
    assert report.tasks["a"][1].instructions == 7


def test_budget_exhausted():
    b = build({"y": ".section .text\n.global spin\nspin:\n    J spin\n"})
    b.runtime.create_task("y", "spin")
    assert b.runtime.schedule(50).outcome == "budget_exhausted"


def test_create_task_errors():
    b = build({"y": YIELDER})
    with pytest.raises(UnknownSymbol):
        b.runtime.create_task("nope", "loop_a")
    with pytest.raises(UnknownSymbol):
        b.runtime.create_task("y", "missing")
    with pytest.raises(ValueError):
        b.runtime.create_queue("bad", 0, 4)


def test_unknown_syscall_is_illegal_and_kills_at_depth_zero():
    b = build({"y": ".section .text\n.global f\nf:\n    SYSCALL 99\n    HALT\n"})
    b.runtime.create_task("y", "f", name="t")
    b.runtime.schedule(100)
    assert b.runtime.task("t").state is TaskState.DEAD
    assert b.faults.log.entries[0].kind == "IllegalInstruction"
    assert b.faults.log.entries[0].outcome == "task_dead"


def test_send_checks_buffer_capability():
    src = PRODUCER.replace("CLC c0, cap(item)\n    CSW x3, 0(c0)", "CCLEAR c0")
    b = build({"p": src})
    b.runtime.create_queue("q", 2, 4)
    b.runtime.create_task("p", "produce", name="prod")
    b.runtime.schedule(100)
    assert b.faults.log.entries[0].kind == "TagViolation"


def test_ipc_cost_model_components():
    assert costmodel.queue_copy(1) == costmodel.QUEUE_BOOKKEEPING + costmodel.QUEUE_COPY_PER_WORD
    assert costmodel.queue_copy(8) == costmodel.QUEUE_BOOKKEEPING + 2 * costmodel.QUEUE_COPY_PER_WORD


def test_coherent_after_boot():
    b = build({"y": YIELDER})
    tid = b.runtime.create_task("y", "loop_a")
    tcb = b.runtime.tasks[tid]
    assert b.runtime.coherent(tcb) and tcb.entry_depth == 0
