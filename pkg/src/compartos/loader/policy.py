"""Boot-time security policy: which compartments exist and who may call whom.

Line-oriented text, ``#`` comments::

    compartment <name> <module>[,<module>...] strategy=<s> [bound_stack=<bool>] [scrub_stack=<bool>]
    allow <caller> -> <callee> : <symbol|*>
    boot_order <name> ...
    task <name> <compartment> <entry_symbol> [stack=<bytes>]
    queue <name> <capacity> <item_size>
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path


class StrategyKind(enum.Enum):
    RETURN_ERROR = "return_error"
    CUSTOM = "custom"
    KILL = "kill"
    MICRO_REBOOT = "micro_reboot"


class PolicyError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"policy line {lineno}: {message}" if lineno else message)
        self.lineno = lineno


@dataclass(frozen=True)
class FaultStrategy:
    kind: StrategyKind
    handler: str | None = None

    def __str__(self) -> str:
        return self.kind.value


@dataclass
class CompartmentDecl:
    name: str
    modules: list[str]
    strategy: StrategyKind
    bound_stack: bool = True
    scrub_stack: bool = False
    lineno: int = 0


@dataclass(frozen=True)
class AllowRule:
    caller: str
    callee: str
    symbol: str

    def matches(self, caller: str, callee: str, symbol: str) -> bool:
        return self.caller == caller and self.callee == callee and self.symbol in ("*", symbol)


@dataclass
class TaskDecl:
    name: str
    compartment: str
    entry: str
    stack_size: int = 1024


@dataclass
class QueueDecl:
    name: str
    capacity: int
    item_size: int


@dataclass
class SecurityPolicy:
    compartments: list[CompartmentDecl] = field(default_factory=list)
    allow_rules: list[AllowRule] = field(default_factory=list)
    boot_order: list[str] | None = None
    tasks: list[TaskDecl] = field(default_factory=list)
    queues: list[QueueDecl] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def decl(self, name: str) -> CompartmentDecl:
        for d in self.compartments:
            if d.name == name:
                return d
        raise KeyError(name)

    def ordered(self) -> list[CompartmentDecl]:
        if self.boot_order is None:
            return list(self.compartments)
        return [self.decl(n) for n in self.boot_order]

    def allowed(self, caller: str, callee: str, symbol: str) -> bool:
        return any(r.matches(caller, callee, symbol) for r in self.allow_rules)


_NAME = re.compile(r"^[A-Za-z_][\w-]*$")
_ALLOW = re.compile(r"^allow\s+(\S+)\s*->\s*(\S+)\s*:\s*(\S+)$")


def _bool(value: str, lineno: int) -> bool:
    if value.lower() in ("true", "1", "yes", "on"):
        return True
    if value.lower() in ("false", "0", "no", "off"):
        return False
    raise PolicyError(lineno, f"bad boolean {value!r}")


def _name(value: str, lineno: int) -> str:
    if not _NAME.match(value):
        raise PolicyError(lineno, f"bad name {value!r}")
    return value


def _options(tokens: list[str], allowed: set[str], lineno: int) -> dict[str, str]:
    opts = {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if not eq or key not in allowed:
            raise PolicyError(lineno, f"unknown key {key!r}")
        if key in opts:
            raise PolicyError(lineno, f"duplicate key {key!r}")
        opts[key] = value
    return opts


def parse_policy(text: str, base_dir: Path | str = ".") -> SecurityPolicy:
    policy = SecurityPolicy(base_dir=Path(base_dir))
    names: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        key = words[0]
        if key == "compartment":
            if len(words) < 4:
                raise PolicyError(lineno, "compartment <name> <module> strategy=<s> ...")
            name = _name(words[1], lineno)
            if name in names:
                raise PolicyError(lineno, f"compartment {name} declared twice")
            opts = _options(words[3:], {"strategy", "bound_stack", "scrub_stack"}, lineno)
            if "strategy" not in opts:
                raise PolicyError(lineno, "strategy= is required")
            try:
                strategy = StrategyKind(opts["strategy"])
            except ValueError:
                raise PolicyError(lineno, f"unknown strategy {opts['strategy']!r}") from None
            modules = [m for m in words[2].split(",") if m]
            policy.compartments.append(
                CompartmentDecl(
                    name,
                    modules,
                    strategy,
                    _bool(opts.get("bound_stack", "true"), lineno),
                    _bool(opts.get("scrub_stack", "false"), lineno),
                    lineno,
                )
            )
            names.add(name)
        elif key == "allow":
            m = _ALLOW.match(line)
            if not m:
                raise PolicyError(lineno, "allow <caller> -> <callee> : <symbol|*>")
            policy.allow_rules.append(AllowRule(_name(m.group(1), lineno), _name(m.group(2), lineno), m.group(3)))
        elif key == "boot_order":
            if policy.boot_order is not None:
                raise PolicyError(lineno, "boot_order given twice")
            policy.boot_order = [_name(w, lineno) for w in words[1:]]
        elif key == "task":
            if len(words) < 4:
                raise PolicyError(lineno, "task <name> <compartment> <entry> [stack=N]")
            opts = _options(words[4:], {"stack"}, lineno)
            try:
                stack = int(opts.get("stack", "1024"), 0)
            except ValueError:
                raise PolicyError(lineno, "bad stack size") from None
            policy.tasks.append(TaskDecl(_name(words[1], lineno), _name(words[2], lineno), words[3], stack))
        elif key == "queue":
            if len(words) != 4:
                raise PolicyError(lineno, "queue <name> <capacity> <item_size>")
            try:
                cap, size = int(words[2], 0), int(words[3], 0)
            except ValueError:
                raise PolicyError(lineno, "bad queue geometry") from None
            if cap <= 0 or size <= 0:
                raise PolicyError(lineno, "queue capacity and item size must be positive")
            policy.queues.append(QueueDecl(_name(words[1], lineno), cap, size))
        else:
            raise PolicyError(lineno, f"unknown key {key!r}")

    for rule in policy.allow_rules:
        for who in (rule.caller, rule.callee):
            if who not in names:
                raise PolicyError(0, f"allow rule names undeclared compartment {who}")
    if policy.boot_order is not None:
        for n in policy.boot_order:
            if n not in names:
                raise PolicyError(0, f"boot_order names undeclared compartment {n}")
        if len(set(policy.boot_order)) != len(policy.boot_order):
            raise PolicyError(0, "boot_order repeats a compartment")
    for t in policy.tasks:
        if t.compartment not in names:
            raise PolicyError(0, f"task {t.name} names undeclared compartment {t.compartment}")
    return policy


def load_policy(path: Path | str) -> SecurityPolicy:
    path = Path(path)
    return parse_policy(path.read_text(encoding="utf-8"), path.parent)
