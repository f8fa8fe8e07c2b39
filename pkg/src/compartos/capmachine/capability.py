"""Capability values and the monotonic derivation algebra."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

CAP_SIZE = 16
ADDR_MASK = 0xFFFFFFFF

_CAP_STRUCT = struct.Struct("<IIIBBH")


class Perm(enum.IntFlag):
    NONE = 0
    LOAD = 1
    STORE = 2
    EXECUTE = 4
    LOAD_CAP = 8
    STORE_CAP = 16
    ALL = LOAD | STORE | EXECUTE | LOAD_CAP | STORE_CAP


class Seal(enum.IntEnum):
    UNSEALED = 0
    SENTRY = 1


class FaultKind(enum.Enum):
    TAG = "TagViolation"
    BOUNDS = "BoundsViolation"
    PERM = "PermViolation"
    SEAL = "SealViolation"
    ILLEGAL = "IllegalInstruction"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> FaultKind:
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        return cls.ILLEGAL


_KIND_CODES = {
    FaultKind.TAG: 1,
    FaultKind.BOUNDS: 2,
    FaultKind.PERM: 3,
    FaultKind.SEAL: 4,
    FaultKind.ILLEGAL: 5,
}


class CapabilityFault(Exception):
    kind = FaultKind.ILLEGAL

    def __init__(self, detail: str = "", address: int | None = None):
        super().__init__(detail or self.kind.value)
        self.detail = detail
        self.address = address


class TagViolation(CapabilityFault):
    kind = FaultKind.TAG


class SealViolation(CapabilityFault):
    kind = FaultKind.SEAL


class PermViolation(CapabilityFault):
    kind = FaultKind.PERM


class BoundsViolation(CapabilityFault):
    kind = FaultKind.BOUNDS


class MonotonicityViolation(BoundsViolation):
    """Requested bounds are not contained in the source capability."""


class IllegalInstruction(CapabilityFault):
    kind = FaultKind.ILLEGAL


FAULT_CLASSES = {
    FaultKind.TAG: TagViolation,
    FaultKind.BOUNDS: BoundsViolation,
    FaultKind.PERM: PermViolation,
    FaultKind.SEAL: SealViolation,
    FaultKind.ILLEGAL: IllegalInstruction,
}


@dataclass(frozen=True)
class Capability:
    tag: bool
    base: int
    length: int
    cursor: int
    perms: Perm
    seal: Seal = Seal.UNSEALED

    @property
    def top(self) -> int:
        return self.base + self.length

    @property
    def sealed(self) -> bool:
        return self.seal != Seal.UNSEALED

    def contains(self, address: int, size: int = 1) -> bool:
        return self.base <= address and address + size <= self.top

    def overlaps(self, base: int, top: int) -> bool:
        return self.base < top and base < self.top and self.length > 0

    def with_cursor(self, cursor: int) -> Capability:
        # cursor moves never fault; tagged sealed caps lose their tag
        cursor &= ADDR_MASK
        if self.sealed and self.tag:
            return replace(self, cursor=cursor, tag=False)
        return replace(self, cursor=cursor)

    def cleared(self) -> Capability:
        return replace(self, tag=False)

    def pack(self) -> bytes:
        return _CAP_STRUCT.pack(
            self.base & ADDR_MASK,
            self.length & ADDR_MASK,
            self.cursor & ADDR_MASK,
            int(self.perms),
            int(self.seal),
            0,
        )

    @classmethod
    def unpack(cls, raw: bytes, tag: bool) -> Capability:
        base, length, cursor, perms, seal, _ = _CAP_STRUCT.unpack(raw)
        perms = Perm(perms & int(Perm.ALL))
        seal = Seal.SENTRY if seal == Seal.SENTRY else Seal.UNSEALED
        return cls(tag, base, length, cursor, perms, seal)

    def __str__(self) -> str:
        flags = "".join(
            ch if p in self.perms else "-"
            for ch, p in zip("rwxRW", (Perm.LOAD, Perm.STORE, Perm.EXECUTE, Perm.LOAD_CAP, Perm.STORE_CAP))
        )
        seal = " sentry" if self.seal == Seal.SENTRY else ""
        tag = "" if self.tag else " untagged"
        return f"cap[{self.base:#x},{self.top:#x}) @{self.cursor:#x} {flags}{seal}{tag}"


NULL_CAP = Capability(False, 0, 0, 0, Perm.NONE)


def make_root_capability(memory_size: int) -> Capability:
    if memory_size <= 0:
        raise ValueError("memory_size must be positive")
    return Capability(True, 0, memory_size, 0, Perm.ALL)


def _check_derivable(src: Capability) -> None:
    if not src.tag:
        raise TagViolation("derivation from untagged capability")
    if src.sealed:
        raise SealViolation("derivation from sealed capability")


def derive_set_bounds(src: Capability, new_base: int, new_len: int) -> Capability:
    _check_derivable(src)
    if new_len < 0 or new_base < src.base or new_base + new_len > src.top:
        raise MonotonicityViolation(
            f"[{new_base:#x},{new_base + new_len:#x}) not within [{src.base:#x},{src.top:#x})",
            address=new_base,
        )
    return Capability(True, new_base, new_len, new_base, src.perms, Seal.UNSEALED)


def derive_and_perms(src: Capability, mask: Perm | int) -> Capability:
    _check_derivable(src)
    return replace(src, perms=Perm(int(src.perms) & int(mask) & int(Perm.ALL)))


def seal_sentry(src: Capability) -> Capability:
    _check_derivable(src)
    if Perm.EXECUTE not in src.perms:
        raise PermViolation("sentry requires EXECUTE")
    return replace(src, seal=Seal.SENTRY)


def unseal_sentry(src: Capability) -> Capability:
    return replace(src, seal=Seal.UNSEALED)
