"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run standalone with ``python tests/test_acceptance.py`` or under pytest.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
import subprocess
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import build
from gen import random_image
from oracles import access_attempts, derivation_chains

from compartos.capmachine import CGP, CID, CSP, CTX, INSTR_SIZE, Machine, Op
from compartos.capmachine.isa import decode as decode_ins
from compartos.faulthandling import kill_compartment, micro_reboot
from compartos.harness import (
    Scenario,
    Session,
    resolve_scenario,
    run_bench,
    scenarios_root,
)
from compartos.harness.bench import measure_switch_to
from compartos.loader import boot, load_policy
from compartos.loader.reach import edges, isolation_violations
from compartos.modformat import (
    BadMagic,
    MalformedImage,
    ModuleFormatError,
    TruncatedInput,
    UnknownVersion,
    decode,
    encode,
)
from compartos.runtime import Runtime

# golden instruction counts, frozen from the first measurement
GOLDEN = {"fncall": 3, "switch": 76, "ipc": 385, "trampoline": 73}

RESULTS: dict[int, tuple[bool, str]] = {}
_config = None


@pytest.fixture(autouse=True)
def _keep_config(request):
    global _config
    _config = request.config


def report(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    line = f"AC{n:<2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    capman = _config.pluginmanager.getplugin("capturemanager") if _config else None
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    assert ok, line


# 1 ---------------------------------------------------------------------------

def test_ac01_capability_algebra_fuzz():
    t0 = time.perf_counter()
    bad = derivation_chains(10_000, seed=20240601)
    dt = time.perf_counter() - t0
    report(1, "capability algebra fuzz", bad == 0 and dt < 5, f"10000 chains, {bad} violations, {dt:.2f}s")


# 2 ---------------------------------------------------------------------------

def test_ac02_access_check_fuzz():
    t0 = time.perf_counter()
    mismatches, traps = access_attempts(10_000, seed=77)
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and 0 < traps < 10_000 and dt < 5
    report(2, "access-check fuzz", ok, f"10000 attempts, {traps} traps, {mismatches} oracle mismatches, {dt:.2f}s")


# 3 ---------------------------------------------------------------------------

def test_ac03_isolation_traversal():
    t0 = time.perf_counter()
    found = []
    checked = 0
    for policy in ("micro/micro.policy", "ecu/ecu.policy"):
        p = load_policy(scenarios_root() / policy)
        system = boot(Machine(), p)
        rt = Runtime.from_policy(system, p)
        for comp in system.compartments.values():
            # live task registers count as roots too; CTX is trampoline-only
            regs = [c for t in rt.tasks.values() if t.home == comp.name
                    for i, c in enumerate(t.regs.c) if i != CTX]
            found += isolation_violations(system, comp, regs)
            checked += 1
    dt = time.perf_counter() - t0
    report(3, "isolation traversal", not found and dt < 1,
           f"{checked} compartments, {len(found)} violations, {dt:.2f}s")


# 4 ---------------------------------------------------------------------------

def test_ac04_constant_switch_cost():
    costs = {n: measure_switch_to(n) for n in (1, 18, 41)}
    tramp = {n: c.trampoline_instructions for n, c in costs.items()}
    total = {n: c.instructions for n, c in costs.items()}
    ok = len(set(tramp.values())) == 1 and len(set(total.values())) == 1 \
        and tramp[1] == GOLDEN["trampoline"]
    report(4, "O(1) switch", ok, f"trampoline instructions by callee size {tramp}")


# 5 ---------------------------------------------------------------------------

def test_ac05_cost_ordering():
    r = run_bench("switch")
    got = {op: r.row("compartos", op).instructions for op in ("fncall", "switch", "ipc")}
    ok = got["fncall"] < got["switch"] < got["ipc"] and got == {k: GOLDEN[k] for k in got}
    report(5, "cost ordering", ok, f"fncall={got['fncall']} < switch={got['switch']} < ipc={got['ipc']}")


# 6 ---------------------------------------------------------------------------

NEST_A = """
.section .text
.global main
main:
    LI x1, 11
    LI x2, 12
    LI x3, 13
    LI x4, 14
    LI x5, 15
    LI x6, 16
    LI x7, 17
    CLC c2, cap(a_data)
    CMOVE c3, c2
    CINCOFFSET c4, c2, 4
    CMOVE c5, csp
    CLC c1, cap(b_fn)
    CJALR c1
    HALT
.section .data
a_data: .word 1, 2
"""

NEST_B = """
.section .text
.interface b_fn
b_fn:
    CINCOFFSET csp, csp, -16
    CSCR cra, 0(csp)
    LI x1, 21
    LI x2, 22
    LI x3, 23
    LI x4, 24
    LI x5, 25
    LI x6, 26
    LI x7, 27
    CLC c2, cap(b_data)
    CMOVE c3, c2
    CMOVE c6, csp
    CLC c1, cap(c_fn)
    CJALR c1
    CLCR cra, 0(csp)
    CINCOFFSET csp, csp, 16
    LI x0, 5
    CRET
.section .data
b_data: .word 3
"""

NEST_C = """
.section .text
.interface c_fn
c_fn:
    LI x1, 0
    LI x2, 0
    LI x3, 0
    LI x4, 0
    LI x5, 0
    LI x6, 0
    LI x7, 0
    CCLEAR c1
    CCLEAR c2
    CCLEAR c3
    CCLEAR c4
    CCLEAR c5
    CCLEAR c6
    CCLEAR c7
    LI x0, 9
    CRET
"""

def _first_cjalr(b, comp: str, fn: str) -> int:
    c = b.comp(comp)
    start, size = c.symbol_address(fn), c.symbol(fn).size
    for addr in range(start, start + size, INSTR_SIZE):
        if decode_ins(b.machine.memory.read(addr, INSTR_SIZE)).op is Op.CJALR:
            return addr
    raise AssertionError(f"no call in {fn}")


# compared at each unwind level; x0/c0 carry results and CRA is the link register
PRESERVED_C = [1, 2, 3, 4, 5, 6, 7, CGP, CSP, CTX, CID]


def test_ac06_trampoline_transparency():
    b = build({"c": NEST_C, "b": NEST_B, "a": NEST_A},
              allows=[("a", "b", "b_fn"), ("b", "c", "c_fn")])
    rt, m = b.runtime, b.machine
    tid = rt.create_task("a", "main")
    tcb = rt.tasks[tid]
    sites = {}
    for comp, fn, level, want in (("a", "main", "A", 5), ("b", "b_fn", "B", 9)):
        call = _first_cjalr(b, comp, fn)
        sites[call] = (level, call + INSTR_SIZE, want)
    returns = {ret: (name, want) for _, (name, ret, want) in sites.items()}
    snaps = {}
    mismatches = []
    levels = []
    rt._enter(tcb)
    for _ in range(1000):
        pc = m.regs.pcc.cursor
        if pc in sites:
            snaps[sites[pc][0]] = m.regs.copy()
        if pc in returns:
            name, want = returns[pc]
            before, now = snaps[name], m.regs
            diff = [i for i in PRESERVED_C if before.c[i] != now.c[i]]
            diff += [f"x{i}" for i in range(1, 8) if before.x[i] != now.x[i]]
            if (now.pcc.base, now.pcc.length) != (before.pcc.base, before.pcc.length):
                diff.append("pcc-bounds")
            if now.x[0] != want:
                diff.append("x0")
            if diff:
                mismatches.append((name, diff))
            levels.append(name)
        out = m.step()
        if out.value != "executed":
            break
    ok = levels == ["B", "A"] and not mismatches and tcb.entry_depth == 0
    report(6, "trampoline transparency", ok,
           f"unwound levels {levels}, mismatches {mismatches or 'none'}")


# 7 ---------------------------------------------------------------------------

KV_VICTIM = """
.section .text
.interface f1
.interface f2
.interface f3
f1:
    CRET
f2:
    CRET
f3:
    CRET
.section .data
v_state: .word 0
"""

KV_BYSTANDER = """
.section .text
.interface g
g:
    LI x0, 1
    CRET
.section .data
g_state: .word 0
"""

KV_CALLER = """
.section .text
.global main
main:
    CINCOFFSET csp, csp, -16
    LI x0, 1
    CLC c1, cap(f1)
    SYSCALL SYS_MARK
    CJALR c1
    LI x0, 2
    CLC c1, cap(f2)
    SYSCALL SYS_MARK
    CJALR c1
    LI x0, 3
    CLC c1, cap(f3)
    SYSCALL SYS_MARK
    CJALR c1
    CLC c1, cap(g)
    CJALR c1
    MV x1, x0
    LI x0, 1
    SYSCALL SYS_OUT
    HALT
"""


def _overlaps_comp(cap, comp) -> bool:
    return any(cap.base < t and b < cap.top for b, t in comp.owned_ranges())


def test_ac07_kill_completeness():
    b = build({"victim": KV_VICTIM, "bystander": KV_BYSTANDER, "caller": KV_CALLER},
              allows=[("caller", "victim", "*"), ("caller", "bystander", "g")],
              strategies={"victim": "kill"})
    system, rt = b.system, b.runtime
    victim = b.comp("victim")
    others = [c for c in system.compartments.values() if c is not victim]
    before = {c.name: edges(system, c) for c in others}
    kill_compartment(system, victim, rt)
    after = {c.name: edges(system, c) for c in others}

    traps = []
    hook = rt.fault_hook

    def record(runtime, tcb, fault):
        traps.append((fault, runtime.machine.counters.copy()))
        hook(runtime, tcb, fault)

    rt.fault_hook = record
    rt.create_task("caller", "main", name="t")
    rep = rt.schedule(10_000)
    marks = {mk.label: mk.counters for mk in rt.marks}
    t_bound = system.layout(True, False).probe_index + 1
    # trampoline instructions retired between each entry attempt and its trap
    spent = [(c - marks[i + 1]).trampoline_instructions for i, (_, c) in enumerate(traps)]
    entries = [e.outcome for e in b.faults.log.entries]
    gained = {n: after[n] - before[n] for n in after}
    lost_foreign = {n: [c for c in before[n] - after[n] if not _overlaps_comp(c, victim)] for n in after}
    ok = (
        entries == ["entry_refused"] * 3
        and all(s <= t_bound for s in spent)
        and rep.outputs_for("t", 1) == [1]
        and not any(gained.values())
        and not any(lost_foreign.values())
    )
    report(7, "kill completeness", ok,
           f"{entries.count('entry_refused')}/3 entries refused, trap after {spent} <= T={t_bound} "
           f"instructions, bystander call ok, non-target edge changes "
           f"{sum(map(len, gained.values())) + sum(map(len, lost_foreign.values()))}")


# 8 ---------------------------------------------------------------------------

def _module(n_text: int, n_data: int) -> str:
    lines = [".section .text", ".interface poke", "poke:", "    CLC c1, cap(d0)", "    LI x1, 99",
             "    CSW x1, 0(c1)", "    CLC c1, cap(ro)", "    CSW x1, 0(c1)"]
    lines += ["    NOP"] * n_text
    lines += ["    CRET", ".section .rodata", "ro: .word 7", ".section .data"]
    lines += [f"d{i}: .word {i}" for i in range(n_data)]
    lines += [".section .bss", "scratch: .zero 16"]
    return "\n".join(lines) + "\n"


CALL_POKE = """
.section .text
.global main
main:
    CLC c1, cap(poke)
    CJALR c1
    MV x1, x0
    LI x0, 1
    SYSCALL SYS_OUT
    HALT
"""


def _mutable_digest(system, comp) -> str:
    h = hashlib.sha256()
    for sec in comp.mutable_sections:
        r = comp.regions[sec]
        h.update(system.machine.memory.read(r.base, r.size))
    return h.hexdigest()[:16]


def _ro_digest(system, comp) -> str:
    mem = system.machine.memory
    return "".join(mem.digest(comp.regions[s].base, comp.regions[s].size) for s in (".text", ".rodata"))


def _reboot_case(n_text: int, n_data: int) -> dict:
    b = build({"m": _module(n_text, n_data), "caller": CALL_POKE}, allows=[("caller", "m", "poke")],
              strategies={"m": "micro_reboot"})
    comp = b.comp("m")
    ro0 = _ro_digest(b.system, comp)
    b.runtime.create_task("caller", "main", name="t")
    b.runtime.schedule(10_000)
    entry = b.faults.log.entries[0]
    return {
        "kind": entry.kind,
        "strategy": entry.strategy,
        "restored": _mutable_digest(b.system, comp) == comp.snapshot_digest(),
        "ro_unchanged": _ro_digest(b.system, comp) == ro0,
        "cost": micro_reboot(b.system, comp),
    }


def test_ac08_micro_reboot_fidelity():
    small_data_large_text = _reboot_case(n_text=400, n_data=2)
    large_data_small_text = _reboot_case(n_text=2, n_data=400)
    same_data_small_text = _reboot_case(n_text=2, n_data=2)
    cases = (small_data_large_text, large_data_small_text, same_data_small_text)
    s = Session.start(scenarios_root() / "ecu" / "ecu.policy")
    parser = s.system.compartments["parser"]
    parser_bytes = sum(r.size for r in parser.regions.values())
    ok = (
        all(c["restored"] and c["ro_unchanged"] for c in cases)
        and all((c["kind"], c["strategy"]) == ("PermViolation", "micro_reboot") for c in cases)
        and small_data_large_text["cost"] < large_data_small_text["cost"]
        and small_data_large_text["cost"] == same_data_small_text["cost"]
        and parser_bytes < 4096
    )
    report(8, "micro-reboot fidelity", ok,
           f"restore cost small-data/large-text={small_data_large_text['cost']} "
           f"large-data/small-text={large_data_small_text['cost']} "
           f"small-data/small-text={same_data_small_text['cost']}, digests restored, "
           f"read-only writes trap, ecu parser image {parser_bytes} B")


# 9 ---------------------------------------------------------------------------

def test_ac09_secure_insecure_differential():
    root = resolve_scenario("vulns")
    meta = json.loads((root / "scenario.json").read_text())
    sc = Scenario.load(root)
    rows = []
    for vuln, target in meta["victims"].items():
        policy = root / sc.variant(vuln)["policy"]
        pristine = Session.start(policy).digest(target)
        sec = sc.run_variant(vuln)
        ins = sc.run_variant(f"{vuln}-insecure")
        kinds = [e.kind for e in sec.session.faults.log.entries]
        caught = bool(kinds) and kinds[0] == meta["kinds"][vuln] and sec.session.digest(target) == pristine
        landed = not ins.session.faults.log.entries and ins.session.digest(target) != pristine
        rows.append((vuln, caught, landed))
    ok = all(c and lnd for _, c, lnd in rows)
    caught_n = sum(c for _, c, _ in rows)
    landed_n = sum(lnd for _, _, lnd in rows)
    report(9, "secure/insecure differential", ok,
           f"{caught_n}/{len(rows)} caught secure, {landed_n}/{len(rows)} landed insecure")


# 10 --------------------------------------------------------------------------

def test_ac10_availability():
    sc = Scenario.load(resolve_scenario("ecu"))
    results = {r.name: r for r in sc.run_all()}
    base = results["baseline"]
    budget = sc.variant("ecu")["expect"]["deadline"]["budget"]
    want = base.outputs("control", 0)
    strategies = set()
    worst = 0
    same = True
    for r in results.values():
        times = [o.instructions for o in r.report.outputs if o.task == "control" and o.channel == 0]
        worst = max([worst, *(b2 - a for a, b2 in zip([0, *times], times))])
        same &= r.outputs("control", 0) == want
        strategies |= {e.strategy.split(">")[0] for e in r.session.faults.log.entries}
    strategies.discard("refused")
    ok = same and worst <= budget and len(want) == 12 and \
        strategies >= {"return_error", "kill", "micro_reboot", "custom"} and all(r.passed for r in results.values())
    report(10, "availability", ok,
           f"{len(results)} runs, strategies {sorted(strategies)}, control outputs identical={same}, "
           f"worst iteration {worst} <= {budget}")


# 11 --------------------------------------------------------------------------

def test_ac11_format_roundtrip():
    rng = random.Random(1111)
    exact = 0
    for _ in range(1000):
        img = random_image(rng)
        blob = encode(img)
        back = decode(blob)
        exact += back == img and encode(back) == blob
    blob = encode(random_image(random.Random(5)))
    corruptions = [
        (BadMagic, b"XPOS" + blob[4:]),
        (UnknownVersion, blob[:4] + struct.pack("<H", 7) + blob[6:]),
        (TruncatedInput, blob[:10]),
        (MalformedImage, blob[:6] + b"\x01\x00" + blob[8:]),
        (MalformedImage, blob + b"junk"),
    ]
    rejected = 0
    for exc, bad in corruptions:
        try:
            decode(bad)
        except ModuleFormatError as err:
            rejected += type(err) is exc
    ok = exact == 1000 and rejected == len(corruptions)
    report(11, "format round-trip", ok,
           f"{exact}/1000 bit-exact, {rejected}/{len(corruptions)} corrupt headers rejected with expected error")


# 12 --------------------------------------------------------------------------

def _cli(*args) -> bytes:
    return subprocess.run([sys.executable, "-m", "compartos.harness.cli", *args],
                          capture_output=True, check=False).stdout


def test_ac12_determinism():
    cmds = [("bench", "switch"), ("bench", "ipc", "--json"), ("inject", "ecu"), ("inject", "overflow-stack")]
    same = []
    for cmd in cmds:
        a, b2 = _cli(*cmd), _cli(*cmd)
        same.append(bool(a) and a == b2)
    report(12, "determinism", all(same), f"{sum(same)}/{len(cmds)} commands byte-identical across two runs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
