from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

from compartos.capmachine import Machine
from compartos.faulthandling import FaultManager
from compartos.loader import (
    AllowRule,
    FaultStrategy,
    LinkedSystem,
    SecurityPolicy,
    StrategyKind,
    link_all,
    load_compartment,
    register_handlers,
)
from compartos.modformat import assemble
from compartos.runtime import Runtime

sys.path.insert(0, str(Path(__file__).parent))


@dataclass
class Built:
    machine: Machine
    system: LinkedSystem
    runtime: Runtime
    faults: FaultManager

    def comp(self, name):
        return self.system.compartments[name]


def build(sources: dict, allows=(), strategies=None, insecure=False, bound_stack=True) -> Built:
    """Load inline-assembled compartments in dict order and link them."""
    strategies = strategies or {}
    machine = Machine(1 << 20, insecure=insecure)
    policy = SecurityPolicy(allow_rules=[AllowRule(*a) for a in allows])
    system = LinkedSystem(machine, policy)
    for name, src in sources.items():
        images = [assemble(s, f"{name}{i}") for i, s in enumerate(src)] if isinstance(src, list) \
            else assemble(src, name)
        kind = StrategyKind(strategies.get(name, "return_error"))
        load_compartment(system, images, name, FaultStrategy(kind), bound_stack)
    link_all(system, policy)
    register_handlers(system)
    rt = Runtime(system)
    return Built(machine, system, rt, FaultManager(rt))


@pytest.fixture
def builder():
    return build
