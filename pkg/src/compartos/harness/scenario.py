"""Scenario directories: policy variants, host steps, and executable expectations.

``scenario.json`` holds a list of variants. Each variant names a policy file,
an optional ``insecure`` flag, ordered steps (``{"poke": "comp.sym", "value": n}``
or ``{"run": max_steps}``), and an ``expect`` block checked after the steps:

* ``outcome``: scheduler outcome of the last run
* ``faultlog``: list of fault shapes (comp, kind, strategy, outcome)
* ``outputs``: task -> channel -> list of values
* ``states``: task -> final state
* ``digests``: ``comp.symbol`` or ``comp:.section`` -> digest
* ``deadline``: task, channel, budget: instructions between outputs never exceed budget
* ``same_outputs``: task, channel, variant: outputs equal those of another variant
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..runtime import RunReport
from .session import Session


class ScenarioError(Exception):
    pass


@dataclass
class VariantResult:
    name: str
    session: Session
    report: RunReport | None
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def outputs(self, task: str, channel: int) -> list[int]:
        return self.report.outputs_for(task, channel) if self.report else []

    def to_text(self, digests: list[str]) -> str:
        lines = [f"== variant {self.name}"]
        if self.report is not None:
            lines.append(self.report.to_text())
        lines.append(self.session.faults.log.to_text().rstrip("\n"))
        for d in digests:
            lines.append(f"digest {d}={self.session.digest(d)}")
        lines.append("check=" + ("PASS" if self.passed else "FAIL"))
        lines.extend(f"  {f}" for f in self.failures)
        return "\n".join(lines)


@dataclass
class Scenario:
    name: str
    root: Path
    variants: list[dict]
    description: str = ""

    @classmethod
    def load(cls, directory: Path | str) -> Scenario:
        root = Path(directory)
        try:
            data = json.loads((root / "scenario.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"{root}: {exc}") from None
        if not isinstance(data.get("variants"), list) or not data["variants"]:
            raise ScenarioError(f"{root}: scenario.json needs a non-empty variants list")
        names = [v.get("name") for v in data["variants"]]
        if len(set(names)) != len(names) or not all(names):
            raise ScenarioError(f"{root}: variant names must be present and unique")
        return cls(data.get("name", root.name), root, data["variants"], data.get("description", ""))

    def variant(self, name: str) -> dict:
        for v in self.variants:
            if v["name"] == name:
                return v
        raise ScenarioError(f"{self.name}: no variant {name}")

    def run_variant(self, name: str, done: dict[str, VariantResult] | None = None) -> VariantResult:
        vspec = self.variant(name)
        session = Session.start(self.root / vspec["policy"], insecure=bool(vspec.get("insecure", False)))
        report = None
        for step in vspec.get("steps", [{"run": 100_000}]):
            if "poke" in step:
                comp, _, sym = step["poke"].partition(".")
                session.poke(comp, sym, int(step["value"]), int(step.get("offset", 0)))
            elif "run" in step:
                report = session.run(int(step["run"]))
            else:
                raise ScenarioError(f"{self.name}/{name}: unknown step {step}")
        result = VariantResult(name, session, report)
        result.failures = check(result, vspec.get("expect", {}), done or {})
        return result

    def run_all(self, only: str | None = None) -> list[VariantResult]:
        done: dict[str, VariantResult] = {}
        names = [v["name"] for v in self.variants]
        if only is not None:
            self.variant(only)
            # variants referenced by same_outputs must run first
            deps = [self.variant(only).get("expect", {}).get("same_outputs", {}).get("variant")]
            names = [n for n in names if n in deps or n == only]
        for n in names:
            done[n] = self.run_variant(n, done)
        return [done[n] for n in names]

    def digest_targets(self, name: str) -> list[str]:
        return sorted(self.variant(name).get("expect", {}).get("digests", {}))


def check(result: VariantResult, expect: dict, done: dict[str, VariantResult]) -> list[str]:
    fails: list[str] = []
    report = result.report
    s = result.session
    if "outcome" in expect and (report is None or report.outcome != expect["outcome"]):
        fails.append(f"outcome {report.outcome if report else None} != {expect['outcome']}")
    if "faultlog" in expect:
        got = s.faults.log.shapes()
        if got != expect["faultlog"]:
            fails.append(f"faultlog {got} != {expect['faultlog']}")
    for task, chans in expect.get("outputs", {}).items():
        for ch, values in chans.items():
            got = result.outputs(task, int(ch))
            if got != values:
                fails.append(f"outputs {task}/{ch} {got} != {values}")
    for task, state in expect.get("states", {}).items():
        got = s.runtime.task(task).state.value
        if got != state:
            fails.append(f"state {task} {got} != {state}")
    for target, digest in expect.get("digests", {}).items():
        got = s.digest(target)
        if got != digest:
            fails.append(f"digest {target} {got} != {digest}")
    if "deadline" in expect:
        d = expect["deadline"]
        times = [o.instructions for o in (report.outputs if report else [])
                 if o.task == d["task"] and o.channel == int(d["channel"])]
        gaps = [b - a for a, b in zip([0, *times], times)]
        worst = max(gaps, default=0)
        if worst > int(d["budget"]):
            fails.append(f"deadline {d['task']} worst iteration {worst} > {d['budget']}")
    if "same_outputs" in expect:
        d = expect["same_outputs"]
        other = done.get(d["variant"])
        if other is None:
            fails.append(f"same_outputs: variant {d['variant']} has not run")
        else:
            a = result.outputs(d["task"], int(d["channel"]))
            b = other.outputs(d["task"], int(d["channel"]))
            if a != b:
                fails.append(f"outputs {d['task']}/{d['channel']} differ from {d['variant']}")
    return fails
