"""Two-pass assembler from toy assembly text to a ModuleImage.

Grammar, one statement per line, ``#`` starts a comment::

    .section .text|.rodata|.data|.bss
    .global a, b      .interface f      .local x
    label:            # a symbol; labels starting with ".L" are branch-only
    .word 1, 0x10, sym
    .zero 16
    MNEMONIC operands

Cross-symbol references are written ``cap(sym)`` and only as the slot operand
of CLC; they become GPREL_SLOT relocations patched by the loader.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

from .. import abi
from ..capmachine.capability import FaultKind, Perm
from ..capmachine.isa import (
    CGP,
    CREG_BY_NAME,
    INSTR_SIZE,
    NUM_XREGS,
    SHAPES,
    Op,
    encode,
)
from .image import (
    MAX_NAME,
    SECTION_KINDS,
    SECTION_NAMES,
    ModuleImage,
    Relocation,
    RelocKind,
    Section,
    SectionKind,
    Symbol,
    SymbolClass,
)


class AssemblyError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
        self.message = message


class AsmSyntaxError(AssemblyError):
    pass


class DuplicateSymbol(AssemblyError):
    pass


class UnknownMnemonic(AssemblyError):
    pass


class SymbolClassError(AssemblyError):
    pass


CONSTANTS: dict[str, int] = {p.name: int(p) for p in Perm}
CONSTANTS.update({k.name: k.code for k in FaultKind})
CONSTANTS.update(abi.SYSCALLS)
CONSTANTS["ERR_FAULT"] = abi.ERR_FAULT

_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*):")
_IDENT = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_MEM = re.compile(r"^(.*)\(\s*(\w+)\s*\)$")


@dataclass
class _Stmt:
    lineno: int
    section: str
    offset: int
    kind: str  # "ins" | "word" | "zero"
    op: Op | None = None
    args: list[str] = field(default_factory=list)


def _split_args(text: str) -> list[str]:
    text = text.strip()
    return [a.strip() for a in text.split(",")] if text else []


def assemble(source: str, name: str = "module") -> ModuleImage:
    if not name or len(name.encode("ascii", "replace")) > MAX_NAME:
        raise AsmSyntaxError(0, f"bad module name {name!r}")
    section: str | None = None
    offsets = {s: 0 for s in SECTION_NAMES}
    used: list[str] = []
    labels: dict[str, tuple[str, int, int]] = {}
    branch_labels: dict[str, tuple[str, int]] = {}
    classes: dict[str, tuple[SymbolClass, int]] = {}
    stmts: list[_Stmt] = []

    for lineno, line in enumerate(source.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        while line:
            m = _LABEL.match(line)
            if not m:
                break
            label = m.group(1)
            if section is None:
                raise AsmSyntaxError(lineno, f"label {label} outside any section")
            if label in labels or label in branch_labels:
                raise DuplicateSymbol(lineno, f"symbol {label} already defined")
            if label.startswith(".L"):
                branch_labels[label] = (section, offsets[section])
            else:
                if len(label) > MAX_NAME:
                    raise AsmSyntaxError(lineno, f"symbol {label} longer than {MAX_NAME} bytes")
                labels[label] = (section, offsets[section], lineno)
            line = line[m.end():].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        head_l = head.lower()
        if head_l == ".section":
            sec = rest.strip()
            if sec not in SECTION_KINDS:
                raise AsmSyntaxError(lineno, f"unknown section {sec!r}")
            section = sec
            if sec not in used:
                used.append(sec)
            continue
        if head_l in (".global", ".interface", ".local"):
            cls = {".global": SymbolClass.GLOBAL, ".interface": SymbolClass.INTERFACE, ".local": SymbolClass.LOCAL}[head_l]
            for sym in _split_args(rest):
                if not _IDENT.match(sym) or sym.startswith(".L"):
                    raise AsmSyntaxError(lineno, f"bad symbol name {sym!r}")
                if sym in classes and classes[sym][0] is not cls:
                    raise SymbolClassError(lineno, f"conflicting class for {sym}")
                classes[sym] = (cls, lineno)
            continue
        if section is None:
            raise AsmSyntaxError(lineno, "statement outside any section")
        if head_l == ".word":
            if SECTION_KINDS[section] in (SectionKind.ZERO_FILL, SectionKind.CODE):
                raise AsmSyntaxError(lineno, f".word not allowed in {section}")
            for arg in _split_args(rest):
                stmts.append(_Stmt(lineno, section, offsets[section], "word", args=[arg]))
                offsets[section] += 4
            continue
        if head_l == ".zero":
            if section == ".text":
                raise AsmSyntaxError(lineno, ".zero not allowed in .text")
            n = _int(rest.strip(), lineno)
            if n < 0:
                raise AsmSyntaxError(lineno, ".zero size must be non-negative")
            stmts.append(_Stmt(lineno, section, offsets[section], "zero", args=[str(n)]))
            offsets[section] += n
            continue
        if head.startswith("."):
            raise AsmSyntaxError(lineno, f"unknown directive {head}")
        try:
            op = Op[head.upper()]
        except KeyError:
            raise UnknownMnemonic(lineno, f"unknown mnemonic {head}") from None
        if section != ".text":
            raise AsmSyntaxError(lineno, f"instruction in {section}")
        stmts.append(_Stmt(lineno, section, offsets[section], "ins", op=op, args=_split_args(rest)))
        offsets[section] += INSTR_SIZE

    for sym, (_, lineno) in classes.items():
        if sym not in labels:
            raise AsmSyntaxError(lineno, f"class declared for undefined symbol {sym}")

    payloads = {s: bytearray(offsets[s]) for s in used if s != ".bss"}
    relocs: list[Relocation] = []

    for st in stmts:
        if st.kind == "zero":
            continue
        if st.kind == "word":
            arg = st.args[0]
            if _IDENT.match(arg) and arg not in CONSTANTS:
                relocs.append(Relocation(RelocKind.ABS_IN_SECTION, st.section, st.offset, arg))
                value = 0
            else:
                value = _int(arg, st.lineno)
            struct.pack_into("<I", payloads[st.section], st.offset, value & 0xFFFFFFFF)
            continue
        word, reloc = _encode_ins(st, branch_labels, labels)
        payloads[".text"][st.offset:st.offset + INSTR_SIZE] = word
        if reloc is not None:
            relocs.append(Relocation(RelocKind.GPREL_SLOT, ".text", st.offset + 4, reloc))

    image = ModuleImage(name)
    for sec in SECTION_NAMES:
        if sec not in used:
            continue
        if sec == ".bss":
            image.sections.append(Section(sec, b"", offsets[sec]))
        else:
            image.sections.append(Section(sec, bytes(payloads[sec]), offsets[sec]))

    by_section: dict[str, list[tuple[int, str]]] = {}
    for sym, (sec, off, _) in labels.items():
        by_section.setdefault(sec, []).append((off, sym))
    for sec, entries in by_section.items():
        entries.sort()
        for i, (off, sym) in enumerate(entries):
            end = entries[i + 1][0] if i + 1 < len(entries) else offsets[sec]
            is_fn = sec == ".text"
            cls = classes.get(sym, (SymbolClass.LOCAL, 0))[0]
            if cls is SymbolClass.INTERFACE and not is_fn:
                raise SymbolClassError(labels[sym][2], f"interface symbol {sym} must be a function")
            image.symbols.append(Symbol(sym, cls, sec, off, end - off, is_fn))
    image.symbols.sort(key=lambda s: (SECTION_NAMES.index(s.section), s.offset, s.name))
    image.relocations = relocs
    return image


def _int(text: str, lineno: int) -> int:
    text = text.strip()
    if not text:
        raise AsmSyntaxError(lineno, "missing integer")
    value = 0
    for part in text.split("|"):
        part = part.strip()
        if part in CONSTANTS:
            value |= CONSTANTS[part]
            continue
        try:
            v = int(part, 0)
        except ValueError:
            raise AsmSyntaxError(lineno, f"bad integer {part!r}") from None
        if len(text.split("|")) == 1:
            return v
        value |= v
    return value


def _xreg(text: str, lineno: int) -> int:
    m = re.fullmatch(r"x(\d+)", text.strip().lower())
    if not m or int(m.group(1)) >= NUM_XREGS:
        raise AsmSyntaxError(lineno, f"expected integer register, got {text!r}")
    return int(m.group(1))


def _creg(text: str, lineno: int) -> int:
    name = text.strip().lower()
    if name not in CREG_BY_NAME:
        raise AsmSyntaxError(lineno, f"expected capability register, got {text!r}")
    return CREG_BY_NAME[name]


def _encode_ins(st: _Stmt, branch_labels, labels) -> tuple[bytes, str | None]:
    shapes = SHAPES[st.op]
    if len(st.args) != len(shapes):
        raise AsmSyntaxError(st.lineno, f"{st.op.name} takes {len(shapes)} operands, got {len(st.args)}")
    rd = rs1 = rs2 = imm = 0
    reloc = None
    for shape, arg in zip(shapes, st.args):
        if shape == "xd":
            rd = _xreg(arg, st.lineno)
        elif shape == "x1":
            rs1 = _xreg(arg, st.lineno)
        elif shape == "x2":
            rs2 = _xreg(arg, st.lineno)
        elif shape == "cd":
            rd = _creg(arg, st.lineno)
        elif shape == "c1":
            rs1 = _creg(arg, st.lineno)
        elif shape == "c2":
            rs2 = _creg(arg, st.lineno)
        elif shape == "i":
            imm = _int(arg, st.lineno)
        elif shape == "l":
            if arg in branch_labels or arg in labels:
                sec, off = branch_labels[arg] if arg in branch_labels else labels[arg][:2]
                if sec != ".text":
                    raise AsmSyntaxError(st.lineno, f"branch target {arg} is not in .text")
                imm = off - st.offset
            elif _IDENT.match(arg) and arg not in CONSTANTS:
                raise AsmSyntaxError(st.lineno, f"undefined branch label {arg}")
            else:
                imm = _int(arg, st.lineno)
        elif shape == "m":
            m = _MEM.match(arg)
            if not m:
                raise AsmSyntaxError(st.lineno, f"expected imm(creg), got {arg!r}")
            imm = _int(m.group(1), st.lineno) if m.group(1).strip() else 0
            rs1 = _creg(m.group(2), st.lineno)
        elif shape == "g":
            m = _MEM.match(arg)
            if not m:
                raise AsmSyntaxError(st.lineno, f"expected cap(sym) or idx(cgp), got {arg!r}")
            inner = m.group(2)
            if m.group(1).strip() == "cap":
                if not _IDENT.match(inner):
                    raise AsmSyntaxError(st.lineno, f"bad symbol {inner!r}")
                reloc = inner
            elif inner.lower() == "cgp":
                imm = _int(m.group(1), st.lineno)
            else:
                raise AsmSyntaxError(st.lineno, "CLC slot operand must be cap(sym) or idx(cgp)")
            rs1 = CGP
    if not -(1 << 31) <= imm < (1 << 32):
        raise AsmSyntaxError(st.lineno, "immediate out of range")
    if imm >= (1 << 31):
        imm -= 1 << 32
    return encode(st.op, rd, rs1, rs2, imm), reloc
