import json
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coral.btxml import NodeSpec, TreeSpec, parse_tree_xml, validate_tree
from coral.bus import ServiceError
from coral.engine import FAILURE, RUNNING, SUCCESS, create_runtime, halt_tree, tick_root
from coral.errors import ReadinessError
from coral.registry import (
    BehaviorDecl,
    BehaviorManifest,
    BindError,
    ManifestError,
    bind_leaves,
    export_manifest,
    fetch_manifests,
    manifest_parse,
    manifest_serialize,
    poll_topic,
    ports,
    publish,
    service,
)


def slam_like():
    return BehaviorManifest("slam_server", (
        BehaviorDecl("LoadMap", service("slam/load_map", response={"count": "count"}),
                     ports=ports(("count", "out"))),
        BehaviorDecl("IntegrateSnapshot", service("slam/integrate", {"snapshot": "snapshot"},
                                                  {"count": "count"}),
                     ports=ports(("snapshot", "in"), ("count", "out"))),
        BehaviorDecl("SaveMap", service("slam/save_map", response={"path": "path"}),
                     ports=ports(("path", "out", "where the map went"))),
        BehaviorDecl("CheckStop", poll_topic("ui/stop", "stop"), kind="condition"),
    ))


def until_done(rt, limit=5.0):
    end = time.monotonic() + limit
    while True:
        status = tick_root(rt)
        if status != RUNNING or time.monotonic() > end:
            return status
        time.sleep(0.01)


# -- schema ----------------------------------------------------------------

def test_empty_manifest_roundtrip():
    m = BehaviorManifest("empty")
    assert manifest_parse(manifest_serialize(m)) == m


def test_slam_manifest_roundtrip():
    m = slam_like()
    again = manifest_parse(manifest_serialize(m))
    assert again == m
    assert again.names() == {"LoadMap", "IntegrateSnapshot", "SaveMap", "CheckStop"}


def test_version_two_rejected():
    text = json.dumps({"manifest_version": 2, "skillset": "x", "behaviors": []})
    with pytest.raises(ManifestError, match="manifest_version"):
        manifest_parse(text)


@pytest.mark.parametrize("behavior, where", [
    ({"name": "A", "binding": {"type": "service"}}, "behaviors[0].binding.channel"),
    ({"name": "A", "binding": {"type": "teleport", "channel": "a"}}, "behaviors[0].binding.type"),
    ({"name": "A", "binding": {"type": "service", "channel": "a", "request": {"x": "nope"}}},
     "behaviors[0].binding.request.x"),
    ({"name": "A", "kind": "condition", "binding": {"type": "publish", "channel": "a"}},
     "behaviors[0].binding.type"),
    ({"name": "A", "kind": "gizmo", "binding": {"type": "publish", "channel": "a"}},
     "behaviors[0].kind"),
    ({"name": "A", "ports": [{"name": "p", "direction": "in"}],
      "binding": {"type": "service", "channel": "a", "response": {"r": "p"}}},
     "behaviors[0].binding.response.r"),
])
def test_schema_errors_name_the_field(behavior, where):
    text = json.dumps({"manifest_version": 1, "skillset": "x", "behaviors": [behavior]})
    with pytest.raises(ManifestError) as err:
        manifest_parse(text)
    assert err.value.path == where


def test_duplicate_behavior_rejected():
    b = {"name": "A", "binding": {"type": "publish", "channel": "a"}}
    text = json.dumps({"manifest_version": 1, "skillset": "x", "behaviors": [b, b]})
    with pytest.raises(ManifestError, match="duplicate"):
        manifest_parse(text)


names = st.from_regex(r"[A-Z][a-zA-Z]{0,8}", fullmatch=True)
channels = st.from_regex(r"[a-z][a-z0-9_/]{0,12}", fullmatch=True)


@st.composite
def decls(draw, name):
    port_names = draw(st.lists(st.from_regex(r"[a-z]{1,6}", fullmatch=True), unique=True, max_size=4))
    dirs = [draw(st.sampled_from(["in", "out"])) for _ in port_names]
    ps = tuple((p, d, draw(st.text(max_size=10))) for p, d in zip(port_names, dirs))
    ins = [p for p, d, _ in ps if d == "in"]
    outs = [p for p, d, _ in ps if d == "out"]
    kind = draw(st.sampled_from(["service", "publish", "poll_topic"]))
    ch = draw(channels)
    if kind == "service":
        b = service(ch, {f"f_{p}": p for p in ins}, {f"r_{p}": p for p in outs},
                    draw(st.integers(1, 60000)))
    elif kind == "publish":
        b = publish(ch, {f"f_{p}": p for p in ins})
    else:
        b = poll_topic(ch, draw(st.sampled_from(["", "stop", "ok"])))
    k = "action" if kind == "publish" else draw(st.sampled_from(["action", "condition"]))
    return BehaviorDecl(name, b, k, ports(*ps))


@st.composite
def manifests(draw):
    ns = draw(st.lists(names, unique=True, max_size=5))
    return BehaviorManifest(draw(channels), tuple(draw(decls(n)) for n in ns))


@settings(max_examples=200, deadline=None)
@given(manifests())
def test_manifest_roundtrip_property(m):
    assert manifest_parse(manifest_serialize(m)) == m


# -- export / fetch -----------------------------------------------------------------

def test_export_then_get(client_factory):
    sk, ex = client_factory("slam_server"), client_factory("executor")
    export_manifest(sk, slam_like())
    reply = ex.call("coral/manifest/get/slam_server", {})
    assert manifest_parse(json.dumps(reply)) == slam_like()


def test_export_publishes_once(client_factory):
    sk, listener = client_factory(), client_factory()
    sub = listener.subscribe("coral/manifest")
    export_manifest(sk, slam_like())
    assert sub.next(2).data["skillset"] == "slam_server"


def test_duplicate_skillset_name(client_factory):
    export_manifest(client_factory(), slam_like())
    with pytest.raises(ServiceError) as err:
        export_manifest(client_factory(), slam_like())
    assert err.value.reason == "service_taken"


def test_fetch_two(client_factory):
    export_manifest(client_factory(), BehaviorManifest("a"))
    export_manifest(client_factory(), BehaviorManifest("b"))
    got = fetch_manifests(client_factory(), {"a", "b"}, deadline=2)
    assert set(got) == {"a", "b"}


def test_fetch_missing_names_it(client_factory):
    export_manifest(client_factory(), BehaviorManifest("a"))
    t0 = time.monotonic()
    with pytest.raises(ReadinessError) as err:
        fetch_manifests(client_factory(), {"a", "b"}, deadline=1)
    assert err.value.missing == ["b"]
    assert "b" in str(err.value)
    assert 0.9 <= time.monotonic() - t0 < 2.0


def test_fetch_late_joiner_with_backoff(client_factory):
    ex = client_factory()
    late = client_factory()
    threading.Timer(0.5, lambda: export_manifest(late, BehaviorManifest("b"))).start()
    delays = []

    def sleep(d):
        delays.append(d)
        time.sleep(d)

    t0 = time.monotonic()
    got = fetch_manifests(ex, {"b"}, deadline=30, sleep=sleep)
    assert "b" in got and time.monotonic() - t0 >= 0.5
    assert delays[:3] == [0.1, 0.2, 0.4]


def test_backoff_caps_at_two_seconds(client_factory):
    delays = []
    now = [0.0]

    def sleep(d):
        delays.append(d)
        now[0] += d

    with pytest.raises(ReadinessError):
        fetch_manifests(client_factory(), {"ghost"}, deadline=10, sleep=sleep, clock=lambda: now[0])
    assert delays[:6] == [0.1, 0.2, 0.4, 0.8, 1.6, 2.0]
    assert max(delays) == 2.0


# -- binding ------------------------------------------------------------------------

def serve_slam(client, replies):
    client.serve("slam/save_map", lambda req: replies.get("save", {"status": "success",
                                                                   "path": "/data/m.json"}))
    client.serve("slam/load_map", lambda req: {"status": "success", "count": 0})
    client.serve("slam/integrate", lambda req: {"status": "success",
                                                "count": len(req.get("snapshot", []))})


def one_leaf(name, attrs=None):
    return TreeSpec("T", {"T": NodeSpec("Sequence", children=[NodeSpec("Action", name, attrs or {})])})


def test_check_stop_without_message_fails(client_factory):
    ex = client_factory()
    b = bind_leaves({"slam_server": slam_like()}, ex)
    rt = create_runtime(one_leaf("CheckStop"), b)
    assert tick_root(rt) == FAILURE


def test_check_stop_after_message(client_factory):
    ex, ui = client_factory(), client_factory()
    b = bind_leaves({"slam_server": slam_like()}, ex)
    rt = create_runtime(one_leaf("CheckStop"), b)
    ui.publish("ui/stop", {"stop": True})
    end = time.monotonic() + 2
    while tick_root(rt) != SUCCESS:
        assert time.monotonic() < end
        time.sleep(0.01)


def test_service_leaf_writes_output(client_factory):
    ex, sk = client_factory(), client_factory()
    serve_slam(sk, {})
    rt = create_runtime(one_leaf("SaveMap", {"path": "{map_path}"}),
                        bind_leaves({"slam_server": slam_like()}, ex))
    assert tick_root(rt) == RUNNING  # first tick only issues the call
    assert until_done(rt) == SUCCESS
    assert rt.blackboard.get("map_path") == "/data/m.json"


def test_service_leaf_request_from_blackboard(client_factory):
    ex, sk = client_factory(), client_factory()
    serve_slam(sk, {})
    rt = create_runtime(one_leaf("IntegrateSnapshot", {"snapshot": "{snap}", "count": "{n}"}),
                        bind_leaves({"slam_server": slam_like()}, ex))
    rt.blackboard.set("snap", [[1, 2, 3]] * 7)
    assert until_done(rt) == SUCCESS
    assert rt.blackboard.get("n") == 7


def test_service_failure_status(client_factory):
    ex, sk = client_factory(), client_factory()
    serve_slam(sk, {"save": {"status": "failure"}})
    rt = create_runtime(one_leaf("SaveMap"), bind_leaves({"slam_server": slam_like()}, ex))
    assert until_done(rt) == FAILURE


def test_service_missing_server_fails_with_diagnostic(client_factory):
    ex = client_factory()
    rt = create_runtime(one_leaf("SaveMap"), bind_leaves({"slam_server": slam_like()}, ex))
    assert until_done(rt) == FAILURE
    assert "no_such_service" in rt.diagnostics[0].message


def test_service_timeout(client_factory):
    ex, sk = client_factory(), client_factory()
    sk.serve("slow/op", lambda req: time.sleep(1.0) or {"status": "success"})
    m = BehaviorManifest("s", (BehaviorDecl("Slow", service("slow/op", timeout_ms=200)),))
    rt = create_runtime(one_leaf("Slow"), bind_leaves({"s": m}, ex))
    t0 = time.monotonic()
    assert until_done(rt) == FAILURE
    assert 0.2 <= time.monotonic() - t0 < 0.8


def test_halt_cancels_call(client_factory):
    ex, sk = client_factory(), client_factory()
    gate = threading.Event()
    sk.serve("slow/op", lambda req: gate.wait(2) and {"status": "success"})
    m = BehaviorManifest("s", (BehaviorDecl("Slow", service("slow/op")),))
    rt = create_runtime(one_leaf("Slow"), bind_leaves({"s": m}, ex))
    assert tick_root(rt) == RUNNING
    leaf = rt.root.children[0].behavior
    call = leaf.call
    halt_tree(rt)
    assert leaf.call is None and call.cancelled
    gate.set()
    time.sleep(0.1)
    assert not ex._pending


def test_publish_leaf(client_factory):
    ex, watcher = client_factory(), client_factory()
    sub = watcher.subscribe("cmd/go")
    m = BehaviorManifest("s", (BehaviorDecl("Go", publish("cmd/go", {"speed": "speed"}),
                                            ports=ports(("speed", "in"))),))
    rt = create_runtime(one_leaf("Go", {"speed": "3"}), bind_leaves({"s": m}, ex))
    assert tick_root(rt) == SUCCESS
    assert sub.next(2).data == {"speed": "3"}


def test_conflicting_names_listed(client_factory):
    a = BehaviorManifest("alpha", (BehaviorDecl("LoadMap", publish("a")),))
    b = BehaviorManifest("beta", (BehaviorDecl("LoadMap", publish("b")),))
    with pytest.raises(BindError) as err:
        bind_leaves({"alpha": a, "beta": b}, client_factory())
    assert "alpha" in str(err.value) and "beta" in str(err.value)
    assert err.value.conflicts == {"LoadMap": ["alpha", "beta"]}


def test_validate_empty_implies_create_succeeds(client_factory):
    xml = """<root><BehaviorTree ID="T"><Sequence><LoadMap count="{c}"/><CheckStop/>
      <SaveMap path="{p}"/></Sequence></BehaviorTree></root>"""
    spec = parse_tree_xml(xml)
    m = slam_like()
    assert validate_tree(spec, m.names()) == []
    create_runtime(spec, bind_leaves({"slam_server": m}, client_factory()))
