from __future__ import annotations

import pytest
from conftest import build
from hypothesis import given
from hypothesis import strategies as st

from compartos import abi
from compartos.faulthandling import (
    FaultEntry,
    FaultLog,
    apply_return_error,
    dispatch_fault,
    full_reboot_cost,
    kill_compartment,
    micro_reboot,
)
from compartos.faulthandling.log import FaultLogFormatError
from compartos.runtime import TaskState

# caller calls poke() three times and reports each return value on channel 1
CALLER = """
.section .text
.global main
main:
    LI x5, 0
.Lagain:
    CLC c1, cap(poke)
    CJALR c1
    MV x1, x0
    LI x0, 1
    SYSCALL SYS_OUT
    ADDI x5, x5, 1
    LI x6, 3
    BNE x5, x6, .Lagain
    HALT
"""

# poke() bumps a counter and then writes one word past a 4-byte buffer
VICTIM = """
.section .text
.interface poke
poke:
    CLC c1, cap(counter)
    CLW x2, 0(c1)
    ADDI x2, x2, 1
    CSW x2, 0(c1)
    MV x0, x2
    CLC c1, cap(buf)
    CSW x2, 4(c1)
    CRET
.section .data
counter: .word 100
buf: .word 0
"""

HANDLER = """
.section .text
.global CompartOS_FaultHandler
CompartOS_FaultHandler:
    CLC c1, cap(seen)
    CSW x0, 0(c1)
    CRET
.section .bss
seen: .zero 4
"""

BAD_HANDLER = """
.section .text
.global CompartOS_FaultHandler
CompartOS_FaultHandler:
    CCLEAR c1
    CLW x0, 0(c1)
    CRET
"""

ERR = abi.ERR_FAULT


def run(strategy, victim=VICTIM):
    b = build({"victim": victim, "caller": CALLER}, allows=[("caller", "victim", "poke")],
              strategies={"victim": strategy})
    b.runtime.create_task("caller", "main", name="t")
    report = b.runtime.schedule(10_000)
    return b, report


def test_return_error_unwinds_each_call():
    b, report = run("return_error")
    assert report.outputs_for("t", 1) == [ERR, ERR, ERR]
    assert [e.shape() for e in b.faults.log.entries] == [
        {"comp": "victim", "kind": "BoundsViolation", "strategy": "return_error", "outcome": "returned_error"}
    ] * 3
    # state leaks across faults: the counter kept counting
    assert b.machine.memory.read_word(b.comp("victim").symbol_address("counter")) == 103
    assert b.runtime.task("t").state is TaskState.DONE


def test_micro_reboot_restores_data_each_time():
    b, report = run("micro_reboot")
    assert report.outputs_for("t", 1) == [ERR, ERR, ERR]
    v = b.comp("victim")
    assert b.machine.memory.read_word(v.symbol_address("counter")) == 100
    assert [e.strategy for e in b.faults.log.entries] == ["micro_reboot"] * 3


def test_kill_refuses_later_entries():
    b, report = run("kill")
    assert report.outputs_for("t", 1) == [ERR, ERR, ERR]
    got = [(e.strategy, e.outcome) for e in b.faults.log.entries]
    assert got == [("kill", "returned_error"), ("refused", "entry_refused"), ("refused", "entry_refused")]
    assert b.comp("victim").killed
    # refused entries never reached the callee body: counter bumped once
    assert b.machine.memory.read_word(b.comp("victim").symbol_address("counter")) == 101


def test_custom_handler_runs_in_compartment():
    b, report = run("custom", [VICTIM, HANDLER])
    v = b.comp("victim")
    assert report.outputs_for("t", 1) == [ERR, ERR, ERR]
    assert b.machine.memory.read_word(v.symbol_address("seen")) == 2  # BoundsViolation code
    assert all(e.strategy == "custom" for e in b.faults.log.entries)
    assert all(e.recovery_cost > 30 for e in b.faults.log.entries)


def test_faulting_custom_handler_escalates_to_kill():
    b, report = run("custom", [VICTIM, BAD_HANDLER])
    got = [(e.strategy, e.outcome) for e in b.faults.log.entries]
    assert got[0] == ("custom>kill", "returned_error")
    assert got[1:] == [("refused", "entry_refused")] * 2
    assert report.outputs_for("t", 1) == [ERR, ERR, ERR]


def test_fault_at_depth_zero_kills_task():
    src = ".section .text\n.global main\nmain:\n    CCLEAR c1\n    CLW x0, 0(c1)\n    HALT\n"
    b = build({"solo": src})
    b.runtime.create_task("solo", "main", name="t")
    b.runtime.schedule(100)
    assert b.runtime.task("t").state is TaskState.DEAD
    assert b.faults.log.entries[0].outcome == "task_dead"


def test_corrupted_save_area_escalates():
    b = build({"victim": VICTIM, "caller": CALLER}, allows=[("caller", "victim", "poke")])
    rt = b.runtime
    rt.create_task("caller", "main", name="t")

    def smash(runtime, tcb, fault):
        frame = tcb.regs.ctx.cursor - 48
        runtime.machine.memory.clear_tag(frame)  # caller CSP
        dispatch_fault(runtime, tcb, fault, b.faults.log)

    rt.fault_hook = smash
    rt.schedule(1000)
    e = b.faults.log.entries[0]
    assert (e.strategy, e.outcome) == ("return_error>kill", "task_dead")
    assert b.comp("victim").killed


def test_apply_return_error_requires_entry():
    b = build({"victim": VICTIM})
    tid = b.runtime.create_task("victim", "poke")
    with pytest.raises(ValueError):
        apply_return_error(b.runtime, b.runtime.tasks[tid])


def test_primitives_report_costs():
    b = build({"victim": VICTIM, "caller": CALLER}, allows=[("caller", "victim", "poke")])
    v = b.comp("victim")
    # 2 data words restored, 2 data slots re-derived, 1 trampoline re-tagged
    assert micro_reboot(b.system, v) == 2 + 2 * 2 + 1
    assert kill_compartment(b.system, v) == 1
    assert full_reboot_cost(b.system) > 100


@given(
    st.integers(0, 2**31), st.text(min_size=1, max_size=20), st.sampled_from(["TagViolation", "BoundsViolation"]),
    st.text(max_size=20), st.integers(0, 2**32 - 1), st.integers(0, 16), st.text(min_size=1, max_size=20),
    st.integers(0, 10_000), st.text(max_size=60),
)
def test_log_line_roundtrip(seq, task, kind, comp, pc, depth, strategy, cost, detail):
    e = FaultEntry(seq, task, kind, comp or "-", pc, depth, strategy, "returned_error", cost, detail)
    assert FaultEntry.from_line(e.to_line()) == e
    log = FaultLog()
    log.append(e)
    assert list(FaultLog.from_text(log.to_text())) == [e]


def test_log_rejects_garbage():
    with pytest.raises(FaultLogFormatError):
        FaultEntry.from_line("seq=1 task")
    with pytest.raises(FaultLogFormatError):
        FaultLog.from_text("# faultlog v9\n")
