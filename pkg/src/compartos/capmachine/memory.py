"""Flat tagged memory and the capability-checked access paths."""

from __future__ import annotations

import hashlib
import struct

from .capability import (
    CAP_SIZE,
    BoundsViolation,
    Capability,
    Perm,
    PermViolation,
    SealViolation,
    TagViolation,
)

WORD_SIZE = 4
_WORD = struct.Struct("<I")


class TaggedMemory:
    def __init__(self, size: int):
        if size <= 0:
            raise ValueError("memory size must be positive")
        if size % CAP_SIZE:
            raise ValueError(f"memory size must be a multiple of {CAP_SIZE}")
        self.size = size
        self.bytes = bytearray(size)
        self.captags = bytearray(size // CAP_SIZE)

    def _phys(self, address: int, size: int) -> None:
        if address < 0 or address + size > self.size:
            raise BoundsViolation(f"physical address {address:#x} outside memory", address=address)

    # raw (unchecked) access, used by the loader and host tooling

    def read(self, address: int, size: int) -> bytes:
        self._phys(address, size)
        return bytes(self.bytes[address:address + size])

    def write(self, address: int, data: bytes) -> None:
        self._phys(address, len(data))
        self.bytes[address:address + len(data)] = data
        if data:
            first = address // CAP_SIZE
            last = (address + len(data) - 1) // CAP_SIZE
            self.captags[first:last + 1] = bytes(last - first + 1)

    def read_word(self, address: int) -> int:
        self._phys(address, WORD_SIZE)
        return _WORD.unpack_from(self.bytes, address)[0]

    def write_word(self, address: int, value: int) -> None:
        self.write(address, _WORD.pack(value & 0xFFFFFFFF))

    def read_cap(self, address: int) -> Capability:
        if address % CAP_SIZE:
            raise BoundsViolation(f"unaligned capability access at {address:#x}", address=address)
        self._phys(address, CAP_SIZE)
        tag = bool(self.captags[address // CAP_SIZE])
        return Capability.unpack(bytes(self.bytes[address:address + CAP_SIZE]), tag)

    def write_cap(self, address: int, cap: Capability) -> None:
        if address % CAP_SIZE:
            raise BoundsViolation(f"unaligned capability access at {address:#x}", address=address)
        self._phys(address, CAP_SIZE)
        self.bytes[address:address + CAP_SIZE] = cap.pack()
        self.captags[address // CAP_SIZE] = 1 if cap.tag else 0

    def tag_at(self, address: int) -> bool:
        return bool(self.captags[address // CAP_SIZE])

    def clear_tag(self, address: int) -> None:
        self.captags[address // CAP_SIZE] = 0

    def tagged_granules(self, base: int = 0, top: int | None = None):
        top = self.size if top is None else min(top, self.size)
        first = max(base, 0) // CAP_SIZE
        last = (top + CAP_SIZE - 1) // CAP_SIZE
        for i in range(first, last):
            if self.captags[i]:
                yield i * CAP_SIZE

    def digest(self, base: int, size: int) -> str:
        self._phys(base, size)
        h = hashlib.sha256(self.bytes[base:base + size])
        first = base // CAP_SIZE
        last = (base + size + CAP_SIZE - 1) // CAP_SIZE
        h.update(self.captags[first:last])
        return h.hexdigest()[:16]


def check_access(cap: Capability, offset: int, size: int, perm: Perm) -> int:
    """Return the effective address or raise; checks run Tag, Seal, Perm, Bounds."""
    if not cap.tag:
        raise TagViolation("access through untagged capability", address=cap.cursor + offset)
    if cap.sealed:
        raise SealViolation("access through sealed capability", address=cap.cursor + offset)
    if perm not in cap.perms:
        raise PermViolation(f"missing {perm.name}", address=cap.cursor + offset)
    address = cap.cursor + offset
    if not cap.contains(address, size):
        raise BoundsViolation(
            f"access [{address:#x},{address + size:#x}) outside [{cap.base:#x},{cap.top:#x})",
            address=address,
        )
    return address


def load_word(mem: TaggedMemory, cap: Capability, offset: int, checked: bool = True) -> int:
    address = check_access(cap, offset, WORD_SIZE, Perm.LOAD) if checked else cap.cursor + offset
    return mem.read_word(address)


def store_word(mem: TaggedMemory, cap: Capability, offset: int, value: int, checked: bool = True) -> None:
    address = check_access(cap, offset, WORD_SIZE, Perm.STORE) if checked else cap.cursor + offset
    mem.write_word(address, value)


def load_cap(mem: TaggedMemory, cap: Capability, offset: int, checked: bool = True) -> Capability:
    address = check_access(cap, offset, CAP_SIZE, Perm.LOAD_CAP) if checked else cap.cursor + offset
    return mem.read_cap(address)


def store_cap(mem: TaggedMemory, cap: Capability, offset: int, value: Capability, checked: bool = True) -> None:
    address = check_access(cap, offset, CAP_SIZE, Perm.STORE_CAP) if checked else cap.cursor + offset
    mem.write_cap(address, value)
