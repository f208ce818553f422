import json
import time

import pytest

from coral.cli import main, validate_files
from coral.demokit.bag import read_bag
from tests.conftest import BUILTIN_TREE, DEMOS, STUB, coral_cli, demo_copy, instance_processes, write_compose


def test_validate_demo_a(capsys):
    d = DEMOS / "demo_a"
    rc = main(["validate", "-f", str(d / "demo_a.yaml"), "-p", str(d / "demo_a_params.yaml")])
    out = capsys.readouterr().out
    assert rc == 0
    assert "ok: 3 files" in out


def test_validate_json(capsys):
    d = DEMOS / "demo_a"
    assert main(["validate", "--json", "-f", str(d / "demo_a.yaml")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["ok"] and summary["file_count"] == 3
    assert {f["kind"] for f in summary["files"]} == {"compose", "params", "tree"}
    assert summary["total_lines"] == sum(f["lines"] for f in summary["files"])


def test_validate_unknown_leaf(tmp_path, capsys):
    (tmp_path / "t.xml").write_text('<root BTCPP_format="4"><BehaviorTree ID="T">'
                                    '<Sequence><Known/><Mystery/></Sequence></BehaviorTree></root>')
    path = write_compose(tmp_path, {
        "sk": {"command": "x", "x-coral": {"role": "skillset", "exports": ["Known"]}},
        "ex": {"x-coral": {"role": "executor", "tree": "t.xml"}}})
    assert main(["validate", "-f", str(path)]) == 2
    out = capsys.readouterr().out
    assert "Mystery" in out and "Known" not in out.replace("Known/", "")


def test_validate_without_exports_checks_structure_only(tmp_path):
    (tmp_path / "t.xml").write_text(BUILTIN_TREE.replace("AlwaysSuccess", "Anything").format(msec=1))
    path = write_compose(tmp_path, {
        "sk": {"command": "x", "x-coral": {"role": "skillset"}},
        "ex": {"x-coral": {"role": "executor", "tree": "t.xml"}}})
    assert validate_files([path])["ok"]


def test_validate_missing_tree(tmp_path, capsys):
    path = write_compose(tmp_path, {"ex": {"x-coral": {"role": "executor", "tree": "gone.xml"}}})
    assert main(["validate", "-f", str(path)]) == 2
    assert "gone.xml" in capsys.readouterr().out


def test_validate_unknown_params_namespace_warns(tmp_path, capsys):
    (tmp_path / "t.xml").write_text(BUILTIN_TREE.format(msec=1))
    (tmp_path / "p.yaml").write_text("stranger: {parameters: {a: 1}}\n")
    path = write_compose(tmp_path, {"ex": {"x-coral": {"role": "executor", "tree": "t.xml"}}})
    assert main(["validate", "-f", str(path), "-p", str(tmp_path / "p.yaml")]) == 0
    assert "warning" in capsys.readouterr().out


def test_up_config_error(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("services: {}\n")
    assert main(["up", "-f", str(tmp_path / "bad.yaml")]) == 2


def test_down_unknown(tmp_path):
    assert main(["down", "nobody", "--state-dir", str(tmp_path)]) == 2


def test_logs_unknown(tmp_path):
    assert main(["logs", "nobody", "ex", "--state-dir", str(tmp_path)]) == 2


def test_up_demo_a_foreground(tmp_path):
    d = demo_copy(tmp_path, lines=20)
    res = coral_cli("up", "-q", "-f", "demo_a.yaml", "-p", "demo_a_params.yaml", cwd=d)
    assert res.returncode == 0, res.stderr
    saved = json.loads((d / "out" / "demo_a_map.json").read_text())
    expected = sum(len(r["points"]) for r in read_bag(d / "data" / "demo_a_bag.jsonl"))
    assert len(saved["points"]) == expected and saved["snapshot_count"] == 20
    assert "executor: exited(0)" in res.stderr


def test_detached_lifecycle(tmp_path):
    (tmp_path / "tree.xml").write_text(BUILTIN_TREE.format(msec=60000))
    write_compose(tmp_path, {
        "sk": {"command": f"python {STUB}", "x-coral": {"role": "skillset"}},
        "ex": {"depends_on": ["sk"], "x-coral": {"role": "executor", "tree": "tree.xml"}}},
        top={"instance_id": "detached"})
    sd = tmp_path / "state"
    res = coral_cli("up", "-d", "-f", "compose.yaml", "--state-dir", sd, cwd=tmp_path)
    assert res.returncode == 0, res.stderr
    handle = json.loads((sd / "detached.json").read_text())
    assert handle["state"] == "running"
    assert len(instance_processes(handle["run_id"])) >= 3  # supervisor's broker + 2 components

    again = coral_cli("up", "-d", "-f", "compose.yaml", "--state-dir", sd, cwd=tmp_path)
    assert again.returncode == 2 and "already running" in again.stderr

    end = time.monotonic() + 10
    while "ticking" not in (logs := coral_cli("logs", "detached", "ex", "--state-dir", sd)).stdout:
        assert time.monotonic() < end, logs.stdout
        time.sleep(0.2)
    assert "tick 1 T/Sequence[0]: Idle -> Running" in logs.stdout or "Idle -> Running" in logs.stdout

    down = coral_cli("down", "detached", "--state-dir", sd)
    assert down.returncode == 0
    assert "ex: graceful" in down.stdout and "sk: graceful" in down.stdout
    assert not (sd / "detached.json").exists()
    assert instance_processes(handle["run_id"]) == []


def test_readiness_failure_exit_code(tmp_path):
    (tmp_path / "tree.xml").write_text(BUILTIN_TREE.format(msec=10))
    write_compose(tmp_path, {
        "sk": {"command": f"python {STUB} --exit-now 1", "x-coral": {"role": "skillset"}},
        "ex": {"x-coral": {"role": "executor", "tree": "tree.xml"}}})
    res = coral_cli("up", "-q", "-f", "compose.yaml", "--state-dir", tmp_path / "s", cwd=tmp_path)
    assert res.returncode == 3
    assert "sk" in res.stderr


def test_bus_address_override(tmp_path):
    (tmp_path / "tree.xml").write_text(BUILTIN_TREE.format(msec=10))
    write_compose(tmp_path, {
        "sk": {"command": f"python {STUB}", "x-coral": {"role": "skillset"}},
        "ex": {"depends_on": ["sk"], "x-coral": {"role": "executor", "tree": "tree.xml"}}},
        top={"bus": "127.0.0.1:1"})
    res = coral_cli("up", "-q", "-f", "compose.yaml", "--state-dir", tmp_path / "s", cwd=tmp_path)
    assert res.returncode == 0, res.stderr
    seen = json.loads((tmp_path / "sk.seen.json").read_text())
    assert seen["CORAL_BUS_ADDR"] != "127.0.0.1:1"


@pytest.mark.parametrize("argv", [["up"], ["bogus"], []])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2
