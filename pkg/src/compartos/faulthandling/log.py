"""Append-only fault log and its line-oriented text form."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from urllib.parse import quote, unquote

LOG_VERSION = 1
HEADER = f"# faultlog v{LOG_VERSION}"


class FaultLogFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FaultEntry:
    seq: int
    task: str
    kind: str
    comp: str
    pc: int
    depth: int
    strategy: str
    outcome: str
    recovery_cost: int
    detail: str = ""

    def shape(self) -> dict[str, str]:
        """The run-independent part checked by scenario expectations."""
        return {"comp": self.comp, "kind": self.kind, "strategy": self.strategy, "outcome": self.outcome}

    def to_line(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "pc":
                v = f"{v:#x}"
            parts.append(f"{f.name}={quote(str(v), safe='')}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> FaultEntry:
        kv = {}
        for tok in line.split():
            k, eq, v = tok.partition("=")
            if not eq:
                raise FaultLogFormatError(f"bad token {tok!r}")
            kv[k] = unquote(v)
        names = [f.name for f in fields(cls)]
        if sorted(kv) != sorted(names):
            raise FaultLogFormatError(f"fields {sorted(kv)} != {sorted(names)}")
        try:
            return cls(
                seq=int(kv["seq"]),
                task=kv["task"],
                kind=kv["kind"],
                comp=kv["comp"],
                pc=int(kv["pc"], 16),
                depth=int(kv["depth"]),
                strategy=kv["strategy"],
                outcome=kv["outcome"],
                recovery_cost=int(kv["recovery_cost"]),
                detail=kv["detail"],
            )
        except ValueError as exc:
            raise FaultLogFormatError(str(exc)) from None


class FaultLog:
    def __init__(self) -> None:
        self._entries: list[FaultEntry] = []

    def append(self, entry: FaultEntry) -> None:
        self._entries.append(entry)

    def next_seq(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[FaultEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def shapes(self) -> list[dict[str, str]]:
        return [e.shape() for e in self._entries]

    def to_text(self) -> str:
        return "\n".join([HEADER, *(e.to_line() for e in self._entries)]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> FaultLog:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != HEADER:
            raise FaultLogFormatError("missing or unsupported faultlog header")
        log = cls()
        for ln in lines[1:]:
            log.append(FaultEntry.from_line(ln))
        return log

    def as_dicts(self) -> list[dict]:
        return [asdict(e) for e in self._entries]
