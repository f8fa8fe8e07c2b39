from __future__ import annotations

import json

import pytest

from compartos.harness import (
    Scenario,
    ScenarioError,
    Session,
    graph,
    resolve_scenario,
    run_bench,
    scenarios_root,
)
from compartos.harness.cli import main
from compartos.modformat import decode

SHIPPED = ["micro", "overflow-stack", "ecu", "vulns"]


def cli(capsys, *args):
    code = main(list(args))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_scenarios_pass(name):
    results = Scenario.load(resolve_scenario(name)).run_all()
    assert results and all(r.passed for r in results), [r.failures for r in results]


def test_scenario_check_detects_mismatch(tmp_path):
    src = scenarios_root() / "micro"
    for f in src.iterdir():
        (tmp_path / f.name).write_bytes(f.read_bytes())
    data = json.loads((tmp_path / "scenario.json").read_text())
    data["variants"][0]["expect"]["outcome"] = "deadlock"
    (tmp_path / "scenario.json").write_text(json.dumps(data))
    [r] = Scenario.load(tmp_path).run_all()
    assert not r.passed and "outcome" in r.failures[0]


def test_scenario_load_errors(tmp_path):
    (tmp_path / "scenario.json").write_text('{"variants": []}')
    with pytest.raises(ScenarioError):
        Scenario.load(tmp_path)
    with pytest.raises(FileNotFoundError):
        resolve_scenario(str(tmp_path / "nope"))


def test_session_poke_peek_digest():
    s = Session.start(scenarios_root() / "ecu" / "ecu.policy")
    before = s.digest("parser.countdown")
    s.poke("parser", "countdown", 9)
    assert s.peek("parser", "countdown") == 9
    assert s.digest("parser.countdown") != before
    with pytest.raises(ValueError):
        s.poke("parser", "countdown", 1, offset=4)


def test_bench_report_formats():
    r = run_bench("fncall")
    assert [row.operation for row in r.rows] == ["fncall", "fncall"]
    data = json.loads(r.to_json())
    assert data["version"] == 1 and data["rows"][0]["instructions"] == 3
    assert r.to_table().splitlines()[0].startswith("# benchmark report v1")
    with pytest.raises(ValueError):
        run_bench("nope")


def test_graph_dot_has_denied_edge():
    s = Session.start(scenarios_root() / "ecu" / "ecu.policy")
    dot = graph.to_dot(s.system)
    assert '"control" -> "parser" [label="parse_frame"];' in dot
    assert "style=dashed" in dot and dot.startswith("digraph")


def test_cli_asm_roundtrip(tmp_path, capsys):
    out = tmp_path / "sender.cpo"
    code, _, _ = cli(capsys, "asm", str(scenarios_root() / "micro" / "sender.s"), "-o", str(out))
    assert code == 0
    assert decode(out.read_bytes()).symbol("sender_main") is not None


def test_cli_policy_with_binary_modules(tmp_path, capsys):
    for n in ("sender", "receiver"):
        assert main(["asm", str(scenarios_root() / "micro" / f"{n}.s"), "-o", str(tmp_path / f"{n}.cpo")]) == 0
    policy = (scenarios_root() / "micro" / "micro.policy").read_text().replace(".s ", ".cpo ")
    (tmp_path / "m.policy").write_text(policy)
    capsys.readouterr()
    code, out, _ = cli(capsys, "run", str(tmp_path / "m.policy"))
    assert code == 0 and "out task=sender channel=1 value=0x2b" in out


def test_cli_exit_codes(tmp_path, capsys):
    assert cli(capsys, "link", str(tmp_path / "missing.policy"))[0] == 1
    with pytest.raises(SystemExit) as exc:
        main(["bench", "everything"])
    assert exc.value.code == 1
    (tmp_path / "bad.policy").write_text("compartment x\n")
    assert cli(capsys, "link", str(tmp_path / "bad.policy"))[0] == 2
    (tmp_path / "bad.s").write_text(".section .text\nf:\n  FROB\n")
    assert cli(capsys, "asm", str(tmp_path / "bad.s"), "-o", str(tmp_path / "o"))[0] == 2
    (tmp_path / "dead.s").write_text(".section .text\n.global m\nm:\n  CCLEAR c1\n  CLW x0, 0(c1)\n  HALT\n")
    (tmp_path / "dead.policy").write_text("compartment d dead.s strategy=kill\ntask t d m\n")
    code, out, _ = cli(capsys, "run", str(tmp_path / "dead.policy"))
    assert code == 3 and "state=dead" in out
    assert cli(capsys, "inject", "no-such-scenario")[0] == 1


def test_cli_link_and_graph(tmp_path, capsys):
    policy = str(scenarios_root() / "ecu" / "ecu.policy")
    code, out, _ = cli(capsys, "link", policy)
    assert code == 0 and "diagnostic policy-denied: malicious -> service : sock_send" in out
    dot = tmp_path / "g.dot"
    assert cli(capsys, "graph", policy, "-o", str(dot))[0] == 0
    assert dot.read_text().startswith("digraph compartments {")


def test_cli_run_overflow_secure_vs_insecure(capsys):
    policy = str(scenarios_root() / "overflow-stack" / "return_error.policy")
    code, secure, _ = cli(capsys, "run", policy)
    assert code == 0 and "kind=BoundsViolation" in secure
    code, insecure, _ = cli(capsys, "run", policy, "--insecure")
    assert code == 0 and "kind=" not in insecure


def test_cli_inject_variant(capsys):
    code, out, _ = cli(capsys, "inject", "vulns", "--variant", "fnptr-insecure")
    assert code == 0
    assert "== variant fnptr-insecure" in out and "== variant fnptr\n" not in out
