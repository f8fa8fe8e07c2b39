"""Relocatable module images and the `.cpo` binary container."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from ..capmachine.isa import INSTR_SIZE, Op

MAGIC = b"CPOS"
FORMAT_VERSION = 1
NAME_FIELD = 64
MAX_NAME = NAME_FIELD - 1

SECTION_NAMES = (".text", ".rodata", ".data", ".bss")


class SectionKind(enum.IntEnum):
    CODE = 0
    READ_ONLY_DATA = 1
    DATA = 2
    ZERO_FILL = 3


SECTION_KINDS = {
    ".text": SectionKind.CODE,
    ".rodata": SectionKind.READ_ONLY_DATA,
    ".data": SectionKind.DATA,
    ".bss": SectionKind.ZERO_FILL,
}


class SymbolClass(enum.IntEnum):
    LOCAL = 0
    GLOBAL = 1
    INTERFACE = 2


class RelocKind(enum.IntEnum):
    GPREL_SLOT = 0
    ABS_IN_SECTION = 1


@dataclass
class Section:
    name: str
    payload: bytes = b""
    size: int = 0

    @property
    def kind(self) -> SectionKind:
        return SECTION_KINDS[self.name]


@dataclass
class Symbol:
    name: str
    cls: SymbolClass
    section: str
    offset: int
    size: int
    is_function: bool


@dataclass
class Relocation:
    kind: RelocKind
    section: str
    offset: int
    target: str


@dataclass
class ModuleImage:
    name: str
    sections: list[Section] = field(default_factory=list)
    symbols: list[Symbol] = field(default_factory=list)
    relocations: list[Relocation] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def section(self, name: str) -> Section | None:
        for sec in self.sections:
            if sec.name == name:
                return sec
        return None

    def symbol(self, name: str) -> Symbol | None:
        for sym in self.symbols:
            if sym.name == name:
                return sym
        return None

    @property
    def defined_names(self) -> set[str]:
        return {s.name for s in self.symbols}

    @property
    def externals(self) -> list[str]:
        """Relocation targets not defined in this module, in first-use order."""
        defined = self.defined_names
        seen: list[str] = []
        for rel in self.relocations:
            if rel.target not in defined and rel.target not in seen:
                seen.append(rel.target)
        return seen


class ModuleFormatError(Exception):
    pass


class BadMagic(ModuleFormatError):
    pass


class TruncatedInput(ModuleFormatError):
    pass


class UnknownVersion(ModuleFormatError):
    pass


class MalformedImage(ModuleFormatError):
    """Structurally invalid or non-canonical table contents."""


_HEADER = struct.Struct(f"<4sHH{NAME_FIELD}sHHHH")
_SECTION = struct.Struct("<BBHII")
_SYMBOL = struct.Struct(f"<{NAME_FIELD}sBBBBII")
_RELOC = struct.Struct(f"<BBHI{NAME_FIELD}s")


def _pack_name(name: str) -> bytes:
    raw = name.encode("ascii")
    if not raw or len(raw) > MAX_NAME or b"\0" in raw:
        raise ModuleFormatError(f"name {name!r} must be 1..{MAX_NAME} ASCII bytes")
    return raw


def _unpack_name(raw: bytes) -> str:
    text, nul, pad = raw.partition(b"\0")
    if not nul or pad.strip(b"\0") or not text:
        raise MalformedImage("name field not NUL-terminated and zero-padded")
    try:
        return text.decode("ascii")
    except UnicodeDecodeError:
        raise MalformedImage("non-ASCII name") from None


def encode(image: ModuleImage) -> bytes:
    out = bytearray(
        _HEADER.pack(
            MAGIC,
            image.format_version,
            0,
            _pack_name(image.name),
            len(image.sections),
            len(image.symbols),
            len(image.relocations),
            0,
        )
    )
    for sec in image.sections:
        if sec.name not in SECTION_KINDS:
            raise ModuleFormatError(f"unknown section {sec.name}")
        if sec.kind is SectionKind.ZERO_FILL:
            if sec.payload:
                raise ModuleFormatError(".bss carries no payload")
        elif len(sec.payload) != sec.size:
            raise ModuleFormatError(f"{sec.name}: payload length {len(sec.payload)} != size {sec.size}")
        out += _SECTION.pack(int(sec.kind), 0, 0, sec.size, len(sec.payload))
        out += sec.payload
    for sym in image.symbols:
        if sym.section not in SECTION_KINDS:
            raise ModuleFormatError(f"symbol {sym.name}: unknown section {sym.section}")
        out += _SYMBOL.pack(
            _pack_name(sym.name),
            int(sym.cls),
            int(SECTION_KINDS[sym.section]),
            int(sym.is_function),
            0,
            sym.offset,
            sym.size,
        )
    for rel in image.relocations:
        out += _RELOC.pack(int(rel.kind), int(SECTION_KINDS[rel.section]), 0, rel.offset, _pack_name(rel.target))
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedInput(f"need {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def _enum(cls, value: int, what: str):
    try:
        return cls(value)
    except ValueError:
        raise MalformedImage(f"bad {what} {value}") from None


def decode(blob: bytes) -> ModuleImage:
    blob = bytes(blob)
    if len(blob) < len(MAGIC):
        raise TruncatedInput("shorter than magic")
    if blob[:4] != MAGIC:
        raise BadMagic(f"bad magic {blob[:4]!r}")
    if len(blob) < 6:
        raise TruncatedInput("missing version")
    version = struct.unpack_from("<H", blob, 4)[0]
    if version != FORMAT_VERSION:
        raise UnknownVersion(f"format version {version}")
    r = _Reader(blob)
    _, _, reserved, name, nsec, nsym, nrel, reserved2 = r.unpack(_HEADER)
    if reserved or reserved2:
        raise MalformedImage("reserved header fields must be zero")
    image = ModuleImage(_unpack_name(name), format_version=version)
    for _ in range(nsec):
        kind, res1, res2, size, plen = r.unpack(_SECTION)
        if res1 or res2:
            raise MalformedImage("reserved section fields must be zero")
        kind = _enum(SectionKind, kind, "section kind")
        if kind is SectionKind.ZERO_FILL:
            if plen:
                raise MalformedImage(".bss with payload")
        elif plen != size:
            raise MalformedImage("payload length differs from size")
        image.sections.append(Section(SECTION_NAMES[kind], r.take(plen), size))
    for _ in range(nsym):
        name, cls, sec, is_fn, res, offset, size = r.unpack(_SYMBOL)
        if res or is_fn > 1:
            raise MalformedImage("bad symbol flags")
        sec = _enum(SectionKind, sec, "symbol section")
        image.symbols.append(
            Symbol(_unpack_name(name), _enum(SymbolClass, cls, "symbol class"), SECTION_NAMES[sec], offset, size, bool(is_fn))
        )
    for _ in range(nrel):
        kind, sec, res, offset, target = r.unpack(_RELOC)
        if res:
            raise MalformedImage("reserved relocation field must be zero")
        sec = _enum(SectionKind, sec, "relocation section")
        image.relocations.append(
            Relocation(_enum(RelocKind, kind, "relocation kind"), SECTION_NAMES[sec], offset, _unpack_name(target))
        )
    if r.pos != len(blob):
        raise MalformedImage(f"{len(blob) - r.pos} trailing bytes")
    return image


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    symbol: str | None = None
    section: str | None = None

    def __str__(self) -> str:
        ctx = []
        if self.section:
            ctx.append(self.section)
        if self.symbol:
            ctx.append(self.symbol)
        where = f" [{' '.join(ctx)}]" if ctx else ""
        return f"{self.code}: {self.message}{where}"


def validate(image: ModuleImage) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    seen_sections: dict[str, Section] = {}
    for sec in image.sections:
        if sec.name not in SECTION_KINDS:
            diags.append(Diagnostic("bad-section", f"unknown section {sec.name}", section=sec.name))
            continue
        if sec.name in seen_sections:
            diags.append(Diagnostic("duplicate-section", f"{sec.name} appears more than once", section=sec.name))
        seen_sections[sec.name] = sec
        if sec.kind is SectionKind.ZERO_FILL and sec.payload:
            diags.append(Diagnostic("bss-payload", ".bss carries payload", section=sec.name))
        if sec.kind is not SectionKind.ZERO_FILL and len(sec.payload) != sec.size:
            diags.append(Diagnostic("size-mismatch", "payload length differs from size", section=sec.name))
    text = seen_sections.get(".text")
    if text is not None and text.size % INSTR_SIZE:
        diags.append(Diagnostic("text-align", ".text size not a multiple of the instruction size", section=".text"))

    names: set[str] = set()
    for sym in image.symbols:
        if sym.name in names:
            diags.append(Diagnostic("duplicate-symbol", "symbol defined twice", symbol=sym.name))
        names.add(sym.name)
        if len(sym.name.encode("ascii", "replace")) > MAX_NAME:
            diags.append(Diagnostic("long-name", "symbol name exceeds 63 bytes", symbol=sym.name))
        sec = seen_sections.get(sym.section)
        if sec is None:
            diags.append(Diagnostic("symbol-section", f"section {sym.section} missing", symbol=sym.name, section=sym.section))
        elif sym.offset + sym.size > sec.size:
            diags.append(Diagnostic("symbol-range", "symbol extends past its section", symbol=sym.name, section=sym.section))
        if sym.cls is SymbolClass.INTERFACE and not sym.is_function:
            diags.append(Diagnostic("interface-not-function", "Interface symbols must be functions", symbol=sym.name, section=sym.section))
        if sym.is_function and sym.section != ".text":
            diags.append(Diagnostic("function-section", "function symbol outside .text", symbol=sym.name, section=sym.section))

    for rel in image.relocations:
        sec = seen_sections.get(rel.section)
        if sec is None:
            diags.append(Diagnostic("reloc-section", f"section {rel.section} missing", symbol=rel.target, section=rel.section))
            continue
        if rel.kind is RelocKind.GPREL_SLOT:
            if rel.section != ".text":
                diags.append(Diagnostic("gprel-site", "GPREL_SLOT outside .text", symbol=rel.target, section=rel.section))
                continue
            ins_off = rel.offset - 4
            if ins_off < 0 or ins_off % INSTR_SIZE or rel.offset + 4 > sec.size:
                diags.append(Diagnostic("gprel-site", "GPREL_SLOT not at an instruction immediate", symbol=rel.target, section=rel.section))
            elif sec.payload[ins_off] != Op.CLC:
                diags.append(Diagnostic("gprel-site", "GPREL_SLOT site is not a CLC", symbol=rel.target, section=rel.section))
        else:
            if sec.kind is SectionKind.ZERO_FILL:
                diags.append(Diagnostic("abs-site", "ABS_IN_SECTION inside .bss", symbol=rel.target, section=rel.section))
            elif rel.offset % 4 or rel.offset + 4 > sec.size:
                diags.append(Diagnostic("abs-site", "ABS_IN_SECTION site out of range", symbol=rel.target, section=rel.section))
    return diags
