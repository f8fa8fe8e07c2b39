"""Secure loader: compartment creation, captables, linking, and trampolines.

The loader is the only holder of the machine's root capability. Everything a
compartment can reach is derived from it here, monotonically.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path

from .. import abi
from ..capmachine.capability import (
    CAP_SIZE,
    NULL_CAP,
    Capability,
    Perm,
    PermViolation,
    TagViolation,
    derive_and_perms,
    derive_set_bounds,
    seal_sentry,
)
from ..capmachine.isa import INSTR_SIZE, Op
from ..capmachine.isa import encode as encode_ins
from ..capmachine.machine import Machine
from ..modformat import (
    ModuleImage,
    RelocKind,
    Section,
    Symbol,
    SymbolClass,
    assemble,
    decode,
    validate,
)
from ..modformat.image import SECTION_NAMES, SectionKind
from . import trampoline as tramp
from .policy import FaultStrategy, SecurityPolicy, StrategyKind

log = logging.getLogger(__name__)

RESERVED_LOW = 0x1000  # never allocated; catches null-ish addresses
ALIGN = CAP_SIZE

CODE_PERMS = Perm.EXECUTE | Perm.LOAD
RODATA_PERMS = Perm.LOAD | Perm.LOAD_CAP
DATA_PERMS = Perm.LOAD | Perm.STORE | Perm.LOAD_CAP | Perm.STORE_CAP
CAPTABLE_PERMS = Perm.LOAD | Perm.LOAD_CAP
TRAMPOLINE_PERMS = Perm.EXECUTE | Perm.LOAD_CAP
STACK_PERMS = DATA_PERMS

SECTION_PERMS = {
    SectionKind.CODE: CODE_PERMS,
    SectionKind.READ_ONLY_DATA: RODATA_PERMS,
    SectionKind.DATA: DATA_PERMS,
    SectionKind.ZERO_FILL: DATA_PERMS,
}


class LoaderError(Exception):
    pass


class OutOfMemory(LoaderError):
    pass


class ValidationFailed(LoaderError):
    def __init__(self, name: str, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__(f"{name}: " + "; ".join(str(d) for d in self.diagnostics))


class DuplicateCompartmentName(LoaderError):
    pass


class UnresolvedRequiredSymbol(LoaderError):
    pass


class LinkError(LoaderError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class BootError(LoaderError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class SlotClass(enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"
    INTERFACE = "interface"
    EXTERNAL = "external"


_SLOT_OF = {
    SymbolClass.LOCAL: SlotClass.LOCAL,
    SymbolClass.GLOBAL: SlotClass.GLOBAL,
    SymbolClass.INTERFACE: SlotClass.INTERFACE,
}


@dataclass
class Region:
    base: int
    size: int
    cap: Capability

    @property
    def top(self) -> int:
        return self.base + self.size

    def contains(self, address: int) -> bool:
        return self.base <= address < self.top


@dataclass
class Slot:
    index: int
    cls: SlotClass
    symbol: str


@dataclass(frozen=True)
class LinkDiagnostic:
    code: str
    caller: str
    symbol: str
    callee: str | None = None
    message: str = ""

    def __str__(self) -> str:
        target = f" -> {self.callee}" if self.callee else ""
        return f"{self.code}: {self.caller}{target} : {self.symbol} {self.message}".rstrip()


@dataclass
class Compartment:
    id: int
    name: str
    image: ModuleImage
    regions: dict[str, Region]
    captable: Region
    slots: dict[str, Slot]
    fault_strategy: FaultStrategy
    bound_stack: bool = True
    scrub_stack: bool = False
    snapshot: dict[str, bytes] = field(default_factory=dict)
    killed: bool = False
    handler_stack: Region | None = None

    @property
    def captable_cap(self) -> Capability:
        return self.captable.cap

    @property
    def n_slots(self) -> int:
        return self.captable.size // CAP_SIZE

    def slot_address(self, index: int) -> int:
        return self.captable.base + index * CAP_SIZE

    def symbol(self, name: str) -> Symbol | None:
        return self.image.symbol(name)

    def symbol_address(self, name: str) -> int:
        sym = self.image.symbol(name)
        if sym is None:
            raise KeyError(f"{self.name}: no symbol {name}")
        return self.regions[sym.section].base + sym.offset

    def external_slots(self) -> dict[str, Slot]:
        return {n: s for n, s in self.slots.items() if s.cls is SlotClass.EXTERNAL}

    def owned_ranges(self) -> list[tuple[int, int]]:
        ranges = [(r.base, r.top) for r in self.regions.values() if r.size]
        ranges.append((self.captable.base, self.captable.top))
        return ranges

    def owns(self, address: int) -> bool:
        return any(b <= address < t for b, t in self.owned_ranges())

    @property
    def mutable_sections(self) -> list[str]:
        return [s for s in (".data", ".bss") if s in self.regions]

    def snapshot_digest(self) -> str:
        h = hashlib.sha256()
        for sec in self.mutable_sections:
            h.update(self.snapshot[sec])
        return h.hexdigest()[:16]


@dataclass
class Trampoline:
    region: Region
    entry: Capability
    layout: tramp.TrampolineLayout
    caller: str | None
    callee: str
    symbol: str
    wrapped: bool = False

    @property
    def metadata_slots(self) -> int:
        return tramp.META_SIZE // CAP_SIZE

    @property
    def code_base(self) -> int:
        return self.region.base + tramp.CODE_OFFSET

    def instruction_index(self, pc: int) -> int:
        return (pc - self.code_base) // INSTR_SIZE

    @property
    def return_point(self) -> int:
        return self.code_base + self.layout.return_index * INSTR_SIZE


class Allocator:
    def __init__(self, base: int, top: int):
        self.next = base
        self.top = top

    def allocate(self, size: int) -> int:
        size = max(size, 0)
        base = (self.next + ALIGN - 1) & ~(ALIGN - 1)
        if base + size > self.top:
            raise OutOfMemory(f"cannot allocate {size} bytes")
        self.next = base + ((size + ALIGN - 1) & ~(ALIGN - 1))
        return base


class LinkedSystem:
    """Loader state plus everything it created; the root never leaves this object."""

    def __init__(self, machine: Machine, policy: SecurityPolicy | None = None):
        self.machine = machine
        self.policy = policy or SecurityPolicy()
        self._root = machine.root
        machine.root = None  # the loader takes custody
        self.allocator = Allocator(RESERVED_LOW, machine.memory.size)
        self.compartments: dict[str, Compartment] = {}
        self.trampolines: list[Trampoline] = []
        self.diagnostics: list[LinkDiagnostic] = []
        self.boot_cost = 0
        self._layouts: dict[tuple[bool, bool], tramp.TrampolineLayout] = {}
        stub = self.allocate(2 * INSTR_SIZE, Perm.EXECUTE)
        machine.memory.write(stub.base, encode_ins(Op.HALT) * 2)
        self.stub_region = stub
        self.task_exit = seal_sentry(derive_set_bounds(stub.cap, stub.base, INSTR_SIZE))
        self.handler_return = seal_sentry(derive_set_bounds(stub.cap, stub.base + INSTR_SIZE, INSTR_SIZE))

    @property
    def root(self) -> Capability:
        return self._root

    def allocate(self, size: int, perms: Perm) -> Region:
        base = self.allocator.allocate(size)
        cap = derive_and_perms(derive_set_bounds(self._root, base, size), perms)
        return Region(base, size, cap)

    def by_id(self, comp_id: int | None) -> Compartment | None:
        if comp_id is None:
            return None
        for comp in self.compartments.values():
            if comp.id == comp_id:
                return comp
        return None

    def trampoline_at(self, address: int) -> Trampoline | None:
        for t in self.trampolines:
            if t.region.contains(address):
                return t
        return None

    def layout(self, bound_stack: bool, scrub_stack: bool) -> tramp.TrampolineLayout:
        key = (bound_stack, scrub_stack)
        if key not in self._layouts:
            self._layouts[key] = tramp.generate(bound_stack, scrub_stack)
        return self._layouts[key]

    def symbol_capability(self, comp: Compartment, sym: Symbol) -> Capability:
        region = comp.regions[sym.section]
        cap = derive_set_bounds(region.cap, region.base + sym.offset, sym.size)
        return seal_sentry(cap) if sym.is_function else cap

    def write_local_slots(self, comp: Compartment) -> int:
        """(Re)derive every defined-symbol slot of a captable; returns slots written."""
        mem = self.machine.memory
        n = 0
        for name, slot in comp.slots.items():
            if slot.cls is SlotClass.EXTERNAL:
                continue
            sym = comp.image.symbol(name)
            mem.write_cap(comp.slot_address(slot.index), self.symbol_capability(comp, sym))
            n += 1
        return n


def merge_images(images: list[ModuleImage], name: str) -> ModuleImage:
    """Concatenate several modules into one linkage unit sharing a captable."""
    if len(images) == 1:
        img = images[0]
        return ModuleImage(name, list(img.sections), list(img.symbols), list(img.relocations), img.format_version)
    names: dict[str, int] = {}
    for img in images:
        for sym in img.symbols:
            names[sym.name] = names.get(sym.name, 0) + 1
    merged = ModuleImage(name)
    payload = {s: bytearray() for s in SECTION_NAMES}
    sizes = {s: 0 for s in SECTION_NAMES}
    present: set[str] = set()
    exported: set[str] = set()
    for img in images:
        rename = {}
        for sym in img.symbols:
            if sym.cls is SymbolClass.LOCAL and names[sym.name] > 1:
                rename[sym.name] = f"{img.name}.{sym.name}"
            elif sym.cls is not SymbolClass.LOCAL:
                if sym.name in exported:
                    raise LinkError([f"{name}: symbol {sym.name} exported by two modules"])
                exported.add(sym.name)
        base = {}
        for sec in img.sections:
            present.add(sec.name)
            pad = (-sizes[sec.name]) % ALIGN
            sizes[sec.name] += pad
            if sec.kind is not SectionKind.ZERO_FILL:
                payload[sec.name] += bytes(pad) + sec.payload
            base[sec.name] = sizes[sec.name]
            sizes[sec.name] += sec.size
        for sym in img.symbols:
            merged.symbols.append(
                replace(sym, name=rename.get(sym.name, sym.name), offset=sym.offset + base[sym.section])
            )
        for rel in img.relocations:
            merged.relocations.append(
                replace(rel, target=rename.get(rel.target, rel.target), offset=rel.offset + base[rel.section])
            )
    for sec in SECTION_NAMES:
        if sec in present:
            data = b"" if sec == ".bss" else bytes(payload[sec])
            merged.sections.append(Section(sec, data, sizes[sec]))
    return merged


def load_compartment(
    system: LinkedSystem,
    image: ModuleImage | list[ModuleImage],
    name: str,
    strategy: FaultStrategy | None = None,
    bound_stack: bool = True,
    scrub_stack: bool = False,
) -> Compartment:
    images = image if isinstance(image, list) else [image]
    if name in system.compartments:
        raise DuplicateCompartmentName(name)
    for img in images:
        diags = validate(img)
        if diags:
            raise ValidationFailed(img.name, diags)
    img = merge_images(images, name)
    diags = validate(img)
    if diags:
        raise ValidationFailed(name, diags)
    mem = system.machine.memory
    cost = 0

    regions: dict[str, Region] = {}
    for sec in img.sections:
        region = system.allocate(sec.size, SECTION_PERMS[sec.kind])
        regions[sec.name] = region
        cost += (sec.size + 3) // 4

    slots: dict[str, Slot] = {}
    index = 1  # slot 0 stays an untagged canary
    for sym in img.symbols:
        slots[sym.name] = Slot(index, _SLOT_OF[sym.cls], sym.name)
        index += 1
    for ext in img.externals:
        slots[ext] = Slot(index, SlotClass.EXTERNAL, ext)
        index += 1
    captable = system.allocate(index * CAP_SIZE, CAPTABLE_PERMS)

    payloads = {sec.name: bytearray(sec.payload) for sec in img.sections if sec.kind is not SectionKind.ZERO_FILL}
    defined = {s.name: s for s in img.symbols}
    for rel in img.relocations:
        site = payloads[rel.section]
        if rel.kind is RelocKind.GPREL_SLOT:
            site[rel.offset:rel.offset + 4] = slots[rel.target].index.to_bytes(4, "little")
        else:
            target = defined.get(rel.target)
            if target is None:
                raise UnresolvedRequiredSymbol(f"{name}: absolute reference to undefined {rel.target}")
            address = regions[target.section].base + target.offset
            site[rel.offset:rel.offset + 4] = address.to_bytes(4, "little")
        cost += 1
    for sec in img.sections:
        region = regions[sec.name]
        if sec.kind is SectionKind.ZERO_FILL:
            mem.write(region.base, bytes(sec.size))
        else:
            mem.write(region.base, bytes(payloads[sec.name]))

    comp = Compartment(
        id=len(system.compartments) + 1,
        name=name,
        image=img,
        regions=regions,
        captable=captable,
        slots=slots,
        fault_strategy=strategy or FaultStrategy(StrategyKind.RETURN_ERROR),
        bound_stack=bound_stack,
        scrub_stack=scrub_stack,
    )
    mem.write(captable.base, bytes(captable.size))
    cost += system.write_local_slots(comp)
    for sec in comp.mutable_sections:
        r = regions[sec]
        comp.snapshot[sec] = mem.read(r.base, r.size)
    system.compartments[name] = comp
    system.boot_cost += cost
    log.debug("loaded %s id=%d slots=%d", name, comp.id, comp.n_slots)
    return comp


def emit_trampoline(
    system: LinkedSystem,
    caller: Compartment | None,
    callee: Compartment,
    symbol: str,
    func: Capability | None = None,
) -> Trampoline:
    layout = system.layout(callee.bound_stack, callee.scrub_stack)
    region = system.allocate(tramp.META_SIZE + len(layout.code), TRAMPOLINE_PERMS)
    mem = system.machine.memory
    if func is None:
        func = mem.read_cap(callee.slot_address(callee.slots[symbol].index))
    mem.write(region.base + tramp.CODE_OFFSET, layout.code)
    mem.write_cap(region.base + tramp.META_FUNC, func)
    mem.write_cap(region.base + tramp.META_CAPTABLE, callee.captable_cap)
    mem.write_cap(region.base + tramp.META_COMPID, replace(NULL_CAP, cursor=callee.id))
    entry = seal_sentry(region.cap.with_cursor(region.base + tramp.CODE_OFFSET))
    system.machine.add_trusted_range(region.base, region.top)
    t = Trampoline(region, entry, layout, caller.name if caller else None, callee.name, symbol, wrapped=caller is None)
    system.trampolines.append(t)
    system.boot_cost += len(layout.code) // 4 + tramp.META_SIZE // CAP_SIZE
    return t


def wrap_function_pointer(system: LinkedSystem, cap: Capability, owner: Compartment) -> Capability:
    """Return a sentry to a fresh trampoline that calls `cap` inside `owner`."""
    if not cap.tag:
        raise TagViolation("cannot wrap an untagged capability")
    if Perm.EXECUTE not in cap.perms:
        raise PermViolation("function pointer is not executable")
    text = owner.regions.get(".text")
    if text is None or not (text.base <= cap.base and cap.top <= text.top):
        raise PermViolation(f"function pointer does not belong to {owner.name}")
    func = cap if cap.sealed else seal_sentry(cap)
    t = emit_trampoline(system, None, owner, f"<fnptr {cap.cursor:#x}>", func=func)
    return t.entry


def link_all(system: LinkedSystem, policy: SecurityPolicy | None = None) -> list[LinkDiagnostic]:
    policy = policy or system.policy
    errors: list[str] = []
    new_diags: list[LinkDiagnostic] = []
    mem = system.machine.memory
    comps = list(system.compartments.values())
    for caller in comps:
        for sym_name, slot in caller.external_slots().items():
            candidates = [c for c in comps if c is not caller and c.image.symbol(sym_name) is not None]
            if not candidates:
                errors.append(f"{caller.name}: unresolved symbol {sym_name}")
                continue
            allowed = [c for c in candidates if policy.allowed(caller.name, c.name, sym_name)]
            if not allowed:
                new_diags.append(
                    LinkDiagnostic("policy-denied", caller.name, sym_name, candidates[0].name, "no allow rule")
                )
                continue
            interfaces = [c for c in allowed if c.image.symbol(sym_name).cls is SymbolClass.INTERFACE]
            if not interfaces:
                new_diags.append(
                    LinkDiagnostic("not-interface", caller.name, sym_name, allowed[0].name, "callee symbol is not an interface")
                )
                continue
            if len(interfaces) > 1:
                new_diags.append(
                    LinkDiagnostic("ambiguous", caller.name, sym_name, interfaces[0].name,
                                   "several interfaces match; first in boot order used")
                )
            t = emit_trampoline(system, caller, interfaces[0], sym_name)
            mem.write_cap(caller.slot_address(slot.index), t.entry)
    system.diagnostics.extend(new_diags)
    if errors:
        raise LinkError(errors)
    return new_diags


def register_handlers(system: LinkedSystem) -> None:
    """Bind a compartment's handler function wherever one is defined, by name."""
    for comp in system.compartments.values():
        sym = comp.image.symbol(abi.HANDLER_SYMBOL)
        if sym is not None and sym.is_function:
            comp.fault_strategy = FaultStrategy(StrategyKind.CUSTOM, sym.name)
        elif comp.fault_strategy.kind is StrategyKind.CUSTOM:
            raise LinkError([f"{comp.name}: strategy custom but no {abi.HANDLER_SYMBOL} defined"])
        if comp.fault_strategy.kind is StrategyKind.CUSTOM and comp.handler_stack is None:
            comp.handler_stack = system.allocate(HANDLER_STACK_SIZE, STACK_PERMS)


HANDLER_STACK_SIZE = 512


def read_module(path: Path) -> ModuleImage:
    if path.suffix == ".s":
        return assemble(path.read_text(encoding="utf-8"), path.stem)
    return decode(path.read_bytes())


def boot(machine: Machine, policy: SecurityPolicy) -> LinkedSystem:
    system = LinkedSystem(machine, policy)
    errors: list[str] = []
    for decl in policy.ordered():
        try:
            images = [read_module(policy.base_dir / m) for m in decl.modules]
            load_compartment(
                system,
                images,
                decl.name,
                FaultStrategy(decl.strategy),
                decl.bound_stack,
                decl.scrub_stack,
            )
        except (LoaderError, OSError, ValueError) as exc:
            errors.append(f"{decl.name}: {exc}")
        except Exception as exc:  # assembler and format errors carry their own context
            if type(exc).__module__.startswith("compartos"):
                errors.append(f"{decl.name}: {exc}")
            else:
                raise
    if errors:
        raise BootError(errors)
    try:
        link_all(system, policy)
        register_handlers(system)
    except LinkError as exc:
        raise BootError(exc.errors) from exc
    return system


def iter_compartment_caps(system: LinkedSystem, comp: Compartment) -> Iterable[Capability]:
    mem = system.machine.memory
    for i in range(comp.n_slots):
        yield mem.read_cap(comp.slot_address(i))
