"""Generic executor process.

Loads a tree, waits for every expected skillset's manifest, binds leaves
from those manifests plus the coordination builtins, and ticks until the
root finishes or it is told to stop. It knows no skillset in advance.

Exit codes: 0 tree succeeded (or stopped), 1 tree failed, 2 bad tree or
binding, 3 readiness failure.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
import threading

from coral.btxml import COORDINATION_BEHAVIORS, load_tree, validate_tree
from coral.bus import BusClient, BusError, TransportError, connect
from coral.component import CONNECT_RETRY, env_params, setup_logging
from coral.coordination import coordination_bindings
from coral.engine import FAILURE, SUCCESS, create_runtime, run_tree
from coral.errors import ConfigError, ReadinessError
from coral.registry import bind_leaves, fetch_manifests

log = logging.getLogger("coral.executor")

STATUS_TOPIC = "coral/status"
EXIT_SUCCESS, EXIT_FAILURE, EXIT_CONFIG, EXIT_READINESS = 0, 1, 2, 3


def _announce(session: BusClient, name: str, state: str, **extra) -> None:
    try:
        session.publish(STATUS_TOPIC, {"component": name, "state": state, **extra})
    except BusError:
        pass


def run_executor(tree_path, session: BusClient, name: str, expected=(), params=None,
                 tick_ms: int = 50, readiness_deadline: float = 30.0,
                 stop: threading.Event | None = None) -> int:
    stop = stop or threading.Event()
    try:
        spec = load_tree(tree_path)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    _announce(session, name, "waiting", expected=sorted(expected))
    try:
        manifests = fetch_manifests(session, expected, deadline=readiness_deadline)
    except ReadinessError as exc:
        log.error("%s", exc)
        _announce(session, name, "not_ready", missing=list(exc.missing))
        return EXIT_READINESS
    except ConfigError as exc:
        log.error("bad manifest: %s", exc)
        return EXIT_CONFIG

    known = set().union(*(m.names() for m in manifests.values())) if manifests else set()
    problems = validate_tree(spec, known)
    for d in problems:
        log.error("%s: %s", d.path, d.message)
    if problems:
        return EXIT_CONFIG
    try:
        bindings = bind_leaves(manifests, session, reserved=COORDINATION_BEHAVIORS)
        bindings.update(coordination_bindings(session, name))
        rt = create_runtime(spec, bindings, tick_period=tick_ms / 1000)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except TransportError as exc:
        log.error("bus lost while binding: %s", exc)
        return EXIT_READINESS
    rt.blackboard.update(params or {})

    log.info("bound %d behaviors from %s; ticking %s every %d ms", len(known),
             ", ".join(sorted(manifests)) or "no skillsets", spec.main_tree_id, tick_ms)
    _announce(session, name, "ticking")
    rt.trace = []
    last = {}

    def on_tick(n, status):
        # one line per node whose returned status differs from the last one it returned
        for path, st in rt.trace:
            before = last.get(path, "Idle")
            if st != before:
                log.info("tick %d %s: %s -> %s", n, path, getattr(before, "value", before), st.value)
                last[path] = st
        rt.trace.clear()

    status = run_tree(rt, stop=stop, on_tick=on_tick)
    if stop.is_set():
        log.info("stopped; tree halted at tick %d", rt.tick_count)
        _announce(session, name, "stopped")
        return EXIT_SUCCESS
    log.info("tree finished: %s after %d ticks", status.value, rt.tick_count)
    _announce(session, name, "done", status=status.value)
    return EXIT_SUCCESS if status == SUCCESS else EXIT_FAILURE if status == FAILURE else EXIT_SUCCESS


def main(argv=None) -> int:
    name = os.environ.get("CORAL_COMPONENT_NAME", "executor")
    setup_logging(name)
    tree_path = (argv or sys.argv[1:] or [os.environ.get("CORAL_TREE_PATH", "")])[0]
    if not tree_path:
        log.error("no tree: set CORAL_TREE_PATH or pass a path")
        return EXIT_CONFIG
    expected = [s for s in os.environ.get("CORAL_EXPECTED_SKILLSETS", "").split(",") if s]
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    try:
        session = connect(None, name, retry_for=CONNECT_RETRY)
    except TransportError as exc:
        log.error("cannot reach the bus: %s", exc)
        return EXIT_READINESS
    try:
        return run_executor(tree_path, session, name, expected, env_params(),
                            int(os.environ.get("CORAL_TICK_MS", "50")),
                            float(os.environ.get("CORAL_READINESS_DEADLINE", "30")), stop)
    finally:
        session.close()


if __name__ == "__main__":
    sys.exit(main())
