import json
import shutil
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coral.bus import BrokerThread, connect
from coral.composer import Instance, Relay, load_compose, parse_compose, parse_duration, parse_params
from coral.errors import ConfigError, ReadinessError, RuntimeFailure
from tests.conftest import BUILTIN_TREE, DEMOS, STUB, instance_processes, write_compose


# -- compose parsing ------------------------------------------------------------

def test_demo_a_compose():
    cfg = load_compose(DEMOS / "demo_a" / "demo_a.yaml")
    assert len(cfg.components) == 4
    roles = sorted(c.role for c in cfg.components)
    assert roles == ["driver", "executor", "skillset", "skillset"]
    ex = cfg.component("executor")
    assert ex.tree == (DEMOS / "demo_a" / "demo_a_tree.xml").resolve()
    assert ex.tick_ms == 20 and ex.command == []
    assert cfg.component("bag_player").depends_on == ["raw_data_server"]
    assert cfg.instance_id == "demo_a" and cfg.readiness_deadline == 30.0


def test_empty_services_needs_headless():
    with pytest.raises(ConfigError, match="no executor"):
        parse_compose("services: {}")
    cfg = parse_compose("x-coral: {headless: true}\nservices: {}")
    assert cfg.components == [] and cfg.headless


@pytest.mark.parametrize("body, fragment", [
    ("services:\n  a:\n    command: x\n    x-coral: {role: widget}", "unknown role"),
    ("services:\n  a:\n    command: x", "missing x-coral.role"),
    ("services:\n  a:\n    x-coral: {role: executor}", "needs x-coral.tree"),
    ("services:\n  a:\n    command: x\n    x-coral: {role: skillset, tree: t.xml}", "only executors"),
    ("services:\n  a:\n    x-coral: {role: skillset}", "command or an image"),
    ("services:\n  a:\n    command: x\n    x-coral: {role: skillset}\n"
     "  a:\n    command: y\n    x-coral: {role: skillset}", "duplicate key"),
    ("services:\n  e:\n    x-coral: {role: executor, tree: t.xml}\n    depends_on: [a]\n"
     "  a:\n    command: x\n    depends_on: [b]\n    x-coral: {role: skillset}\n"
     "  b:\n    command: x\n    depends_on: [a]\n    x-coral: {role: skillset}", "cycle"),
    ("services:\n  e:\n    x-coral: {role: executor, tree: t.xml}\n    depends_on: [ghost]",
     "unknown service"),
    ("services:\n  Bad-Name:\n    x-coral: {role: executor, tree: t.xml}", "[a-z0-9_]+"),
    ("x-coral: {bus: nowhere}\nservices:\n  e:\n    x-coral: {role: executor, tree: t.xml}", "bus"),
    ("services:\n  e:\n    x-coral: {role: executor, tree: t.xml, restart: always}", "restart"),
    ("services:\n  e:\n    x-coral: {role: executor, tree: t.xml, color: red}", "unknown keys"),
    ("- just\n- a list", "mapping"),
    ("services: [", "invalid YAML"),
])
def test_compose_errors(body, fragment):
    with pytest.raises(ConfigError) as err:
        parse_compose(body)
    assert fragment in str(err.value)


def test_standard_compose_keys(tmp_path):
    text = """
x-coral: {instance_id: t1, bus: "127.0.0.1:9000", readiness_deadline: 500ms}
services:
  sk:
    command: "python -m thing --flag 'a b'"
    environment: [A=1, B=two]
    restart: on-failure
    x-coral: {role: skillset, params_ns: shared}
  ex:
    depends_on: {sk: {condition: service_started}}
    environment: {C: 3}
    x-coral: {role: executor, tree: trees/t.xml}
"""
    cfg = parse_compose(text, tmp_path)
    sk, ex = cfg.component("sk"), cfg.component("ex")
    assert sk.command == ["python", "-m", "thing", "--flag", "a b"]
    assert sk.env == {"A": "1", "B": "two"} and sk.restart == "on-failure"
    assert sk.params_ns == "shared" and ex.params_ns == "ex"
    assert ex.depends_on == ["sk"] and ex.env == {"C": "3"}
    assert ex.tree == (tmp_path / "trees" / "t.xml").resolve()
    assert cfg.readiness_deadline == 0.5


@pytest.mark.parametrize("value, seconds", [(30, 30.0), (2.5, 2.5), ("500ms", 0.5), ("30s", 30.0),
                                            ("1m", 60.0), ("7", 7.0)])
def test_durations(value, seconds):
    assert parse_duration(value, "x") == seconds


@pytest.mark.parametrize("value", [0, -1, "soon", True, "0ms"])
def test_bad_durations(value):
    with pytest.raises(ConfigError):
        parse_duration(value, "x")


@st.composite
def dags(draw):
    n = draw(st.integers(1, 7))
    names = [f"s{i}" for i in range(n)]
    deps = {names[i]: draw(st.lists(st.sampled_from(names[:i]), unique=True)) if i else []
            for i in range(n)}
    order = draw(st.permutations(names))
    return order, deps


@settings(max_examples=100, deadline=None)
@given(dags())
def test_start_order_respects_dependencies(dag):
    order, deps = dag
    services = {n: {"command": "x", "depends_on": deps[n], "x-coral": {"role": "skillset"}} for n in order}
    import yaml
    cfg = parse_compose(yaml.safe_dump({"x-coral": {"headless": True}, "services": services}))
    started = []
    for c in cfg.start_order():
        assert all(d in started for d in c.depends_on)
        started.append(c.name)
    assert sorted(started) == sorted(order)


# -- params parsing -----------------------------------------------------------------

def test_params_plain():
    assert parse_params("slam_server: {parameters: {voxel_size: 0.1}}") == {
        "slam_server": {"voxel_size": 0.1}}


def test_params_ros_spelling():
    assert parse_params("slam_server: {ros__parameters: {voxel_size: 0.1}}") == \
        parse_params("slam_server: {parameters: {voxel_size: 0.1}}")


def test_params_flattened():
    assert parse_params("a: {parameters: {b: {c: 1}, d: [1, 2]}}") == {"a": {"b.c": 1, "d": [1, 2]}}


@pytest.mark.parametrize("text", ["[1, 2]", "a: 3", "a: {params: {}}",
                                  "a: {parameters: {b: 1}, ros__parameters: {c: 2}}",
                                  "a: {parameters: {'bad key': 1}}"])
def test_params_errors(text):
    with pytest.raises(ConfigError):
        parse_params(text)


def test_params_empty():
    assert parse_params("") == {}


# -- supervisor -----------------------------------------------------------------------

def stub(*flags, role="skillset", **extra):
    return {"command": f"python {STUB} {' '.join(flags)}".strip(), "x-coral": {"role": role, **extra}}


def executor(tmp_path, msec=200, **extra):
    (tmp_path / "tree.xml").write_text(BUILTIN_TREE.format(msec=msec))
    return {"x-coral": {"role": "executor", "tree": "tree.xml", "tick_ms": 20, **extra}}


def make(tmp_path, services, params=None, top=None, grace=2.0):
    cfg = load_compose(write_compose(tmp_path, services, top))
    return Instance(cfg, params or {}, state_dir=tmp_path / ".coral", grace=grace)


def seen(tmp_path, name):
    return json.loads((tmp_path / f"{name}.seen.json").read_text())


def test_params_and_env_delivery(tmp_path):
    inst = make(tmp_path, {"alpha": stub(), "beta": stub(params_ns="shared"),
                           "ex": {**executor(tmp_path), "depends_on": ["alpha", "beta"]}},
                params={"alpha": {"k": 1}, "shared": {"k": 2, "x.y": "z"}, "ex": {"g": 3}})
    with inst:
        assert inst.wait(20) == 0
    a, b = seen(tmp_path, "alpha"), seen(tmp_path, "beta")
    assert json.loads(a["CORAL_PARAMS"]) == {"k": 1}
    assert json.loads(b["CORAL_PARAMS"]) == {"k": 2, "x.y": "z"}
    assert a["CORAL_COMPONENT_NAME"] == "alpha" and a["CORAL_BUS_ADDR"] == inst.bus_addr
    assert "CORAL_TREE_PATH" not in a
    assert "executor INFO" in inst.read_log("ex") or "tree finished" in inst.read_log("ex")
    assert "tick" in inst.read_log("ex")


def test_dependency_order(tmp_path):
    services = {"c": {**stub(), "depends_on": ["b"]}, "b": {**stub(), "depends_on": ["a"]}, "a": stub(),
                "ex": {**executor(tmp_path), "depends_on": ["c"]}}
    with make(tmp_path, services) as inst:
        inst.wait(20)
    t = {n: seen(tmp_path, n)["started"] for n in "abc"}
    assert t["a"] < t["b"] < t["c"]


def test_supervisor_services(tmp_path):
    inst = make(tmp_path, {"sk": stub()}, params={"sk": {"p": 1}}, top={"headless": True})
    with inst:
        c = connect(inst.bus_addr)
        assert c.call("coral/params/get/sk", {}) == {"p": 1}
        assert c.call("coral/shared", {"op": "set", "key": "k", "value": 5})["status"] == "success"
        assert c.call("coral/shared", {"op": "get", "key": "k"}) == {"status": "success", "value": 5}
        c.close()


def test_readiness_failure_when_skillset_exits(tmp_path):
    inst = make(tmp_path, {"dead": stub("--exit-now 1"), "ok": stub(),
                           "ex": {**executor(tmp_path), "depends_on": ["ok"]}})
    t0 = time.monotonic()
    with pytest.raises(ReadinessError) as err:
        inst.up()
    assert err.value.missing == ["dead"]
    assert time.monotonic() - t0 < 10
    assert inst.state == "down" and inst.exit_code == 3
    assert instance_processes(inst.run_id) == []


def test_readiness_timeout_names_missing(tmp_path):
    inst = make(tmp_path, {"mute": stub("--no-export"), "ex": executor(tmp_path)},
                top={"readiness_deadline": "1s"})
    with pytest.raises(ReadinessError) as err:
        inst.up()
    assert err.value.missing == ["mute"] and "mute" in str(err.value)
    assert instance_processes(inst.run_id) == []


def test_restart_then_ready(tmp_path):
    inst = make(tmp_path, {"flaky": stub("--crash-times 2", restart="on-failure"),
                           "ex": {**executor(tmp_path), "depends_on": ["flaky"]}})
    with inst:
        assert inst.wait(20) == 0
        assert inst.procs["flaky"].restarts == 2
        assert inst.procs["flaky"].history[:2] == [1, 1]
    assert (tmp_path / "flaky.starts").read_text().count("\n") == 3


def test_restarts_exhausted_is_runtime_failure(tmp_path):
    inst = make(tmp_path, {"fragile": stub("--exit-after 0.3", restart="on-failure"),
                           "ex": {**executor(tmp_path, msec=30000), "depends_on": ["fragile"]}})
    with inst:
        assert inst.wait(30) == 4
        assert inst.procs["fragile"].restarts == 3
        assert "fragile" in inst.message
    assert instance_processes(inst.run_id) == []


def test_crash_without_restart_is_runtime_failure(tmp_path):
    inst = make(tmp_path, {"once": stub("--exit-after 0.3"),
                           "ex": {**executor(tmp_path, msec=30000), "depends_on": ["once"]}})
    with inst:
        assert inst.wait(20) == 4
        assert inst.procs["once"].restarts == 0


def test_down_graceful_and_idempotent(tmp_path):
    inst = make(tmp_path, {"sk": stub(), "drv": stub(role="driver"),
                           "ex": {**executor(tmp_path, msec=30000), "depends_on": ["sk"]}})
    inst.up()
    procs = instance_processes(inst.run_id)
    assert len(procs) == 4  # broker + 3 components
    report = inst.down()
    assert report == {"sk": "graceful", "drv": "graceful", "ex": "graceful", "broker": "graceful"}
    assert inst.down() == report
    assert instance_processes(inst.run_id) == []


def test_force_kill_and_grandchildren(tmp_path):
    inst = make(tmp_path, {"stubborn": stub("--ignore-term --spawn-child"),
                           "ex": executor(tmp_path, msec=30000)}, grace=0.5)
    inst.up()
    assert (tmp_path / "stubborn.child").exists()
    report = inst.down()
    assert report["stubborn"] == "forced"
    assert report["ex"] == "graceful"
    assert instance_processes(inst.run_id) == []


def test_spawn_failure_tears_down(tmp_path):
    inst = make(tmp_path, {"sk": stub(), "ghost": {"command": "/nonexistent/binary",
                                                  "depends_on": ["sk"], "x-coral": {"role": "driver"}},
                           "ex": executor(tmp_path)})
    with pytest.raises(RuntimeFailure, match="ghost"):
        inst.up()
    assert instance_processes(inst.run_id) == []


@pytest.mark.skipif(shutil.which("docker") or shutil.which("podman"), reason="container runtime present")
def test_image_without_runtime(tmp_path):
    inst = make(tmp_path, {"img": {"image": "example/skillset:1", "x-coral": {"role": "skillset"}},
                           "ex": executor(tmp_path)})
    with pytest.raises(ConfigError, match="docker or podman"):
        inst.up()


def test_executor_readiness_code_propagates(tmp_path):
    # the skillset is never depended on, so only the executor's own barrier sees it missing
    (tmp_path / "tree.xml").write_text(BUILTIN_TREE.format(msec=10))
    inst = make(tmp_path, {"ex": {"environment": {"CORAL_EXPECTED_SKILLSETS": "phantom",
                                                  "CORAL_READINESS_DEADLINE": "0.5"},
                                  "x-coral": {"role": "executor", "tree": "tree.xml"}}})
    with inst:
        assert inst.wait(20) == 3
    assert "phantom" in inst.read_log("ex")


def test_relay_forwards_both_ways_once():
    with BrokerThread() as a, BrokerThread() as b:
        la, lb = connect(a.address), connect(b.address)
        relay = Relay(la, b.address, "coral/coord/", "left")
        relay.start()
        end = time.monotonic() + 5
        while not relay.connected:
            assert time.monotonic() < end
            time.sleep(0.05)
        watch_b = lb.subscribe("coral/coord/go")
        watch_a = la.subscribe("coral/coord/back")
        time.sleep(0.1)
        la.publish("coral/coord/go", {"seq": 1})
        lb.publish("coral/coord/back", {"seq": 2})
        la.publish("other/topic", {"seq": 3})
        assert watch_b.next(2).data == {"seq": 1, "relayed_from": "left"}
        assert watch_a.next(2).data == {"seq": 2, "relayed_from": "left"}
        time.sleep(0.2)
        assert watch_b.drain() == [] and watch_a.drain() == []
        relay.stop()
        la.close()
        lb.close()
