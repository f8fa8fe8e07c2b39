"""Relocatable linkage-module format and the toy assembler that emits it."""

from .assembler import (
    AsmSyntaxError,
    AssemblyError,
    DuplicateSymbol,
    SymbolClassError,
    UnknownMnemonic,
    assemble,
)
from .image import (
    FORMAT_VERSION,
    MAGIC,
    BadMagic,
    Diagnostic,
    MalformedImage,
    ModuleFormatError,
    ModuleImage,
    Relocation,
    RelocKind,
    Section,
    SectionKind,
    Symbol,
    SymbolClass,
    TruncatedInput,
    UnknownVersion,
    decode,
    encode,
    validate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
