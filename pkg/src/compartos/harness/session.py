"""One booted system: machine, loader state, runtime, and fault manager."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..capmachine.machine import Machine
from ..faulthandling import FaultManager
from ..loader import LinkedSystem, SecurityPolicy, boot, load_policy
from ..runtime import RunReport, Runtime

DEFAULT_MEMORY = 1 << 20


def scenarios_root() -> Path:
    return Path(str(resources.files("compartos") / "scenarios"))


def resolve_scenario(name_or_path: str) -> Path:
    """A scenario is a directory holding scenario.json; shipped ones resolve by name."""
    p = Path(name_or_path)
    if (p / "scenario.json").is_file():
        return p
    shipped = scenarios_root() / name_or_path
    if (shipped / "scenario.json").is_file():
        return shipped
    raise FileNotFoundError(f"no scenario {name_or_path!r}")


@dataclass
class Session:
    machine: Machine
    system: LinkedSystem
    runtime: Runtime
    faults: FaultManager

    @classmethod
    def start(cls, policy: SecurityPolicy | Path | str, insecure: bool = False,
              memory_size: int = DEFAULT_MEMORY) -> Session:
        if not isinstance(policy, SecurityPolicy):
            policy = load_policy(policy)
        machine = Machine(memory_size, insecure=insecure)
        system = boot(machine, policy)
        runtime = Runtime.from_policy(system, policy)
        return cls(machine, system, runtime, FaultManager(runtime))

    def run(self, max_steps: int) -> RunReport:
        return self.runtime.schedule(max_steps)

    def symbol_range(self, comp: str, symbol: str) -> tuple[int, int]:
        c = self.system.compartments[comp]
        sym = c.image.symbol(symbol)
        if sym is None:
            raise KeyError(f"{comp} has no symbol {symbol}")
        return c.symbol_address(symbol), sym.size

    def poke(self, comp: str, symbol: str, value: int, offset: int = 0) -> None:
        """Host-side write into a compartment's data, used to arm injected faults."""
        addr, size = self.symbol_range(comp, symbol)
        if not 0 <= offset <= size - 4:
            raise ValueError(f"offset {offset} outside {comp}.{symbol}")
        self.machine.memory.write_word(addr + offset, value)

    def peek(self, comp: str, symbol: str, offset: int = 0) -> int:
        addr, _ = self.symbol_range(comp, symbol)
        return self.machine.memory.read_word(addr + offset)

    def digest(self, target: str) -> str:
        """Digest of ``comp.symbol`` or ``comp:.section`` bytes and tags."""
        if ":" in target:
            comp, sec = target.split(":", 1)
            region = self.system.compartments[comp].regions[sec]
            return self.machine.memory.digest(region.base, region.size)
        comp, _, symbol = target.partition(".")
        addr, size = self.symbol_range(comp, symbol)
        return self.machine.memory.digest(addr, size)

    def marks(self) -> dict[int, int]:
        return {m.label: m.counters.instructions for m in self.runtime.marks}


