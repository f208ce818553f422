"""Remote coordination leaves available to every executor, plus the shared store.

Signals travel on ``coral/coord/<name>`` as ``{"sender", "seq", "payload"}``.
Triggers are fire-and-forget and waits see no history: recovery from a
missing or mistimed peer belongs in the tree (a Fallback around the wait).
"""

from __future__ import annotations

import itertools
import logging
import threading
from collections import defaultdict

from coral.btxml.nodes import COORDINATION_BEHAVIORS
from coral.bus import BusClient, BusError
from coral.engine import FAILURE, RUNNING, SUCCESS, Behavior

log = logging.getLogger(__name__)

COORD_PREFIX = "coral/coord/"
SHARED_CHANNEL = "coral/shared"
SHARED_TIMEOUT = 2.0

# ports with a fixed meaning; any other attribute is a payload field
_TRIGGER_PORTS = {"name", "payload"}
_WAIT_PORTS = {"name", "timeout_ms", "payload"}


def coord_channel(name: str) -> str:
    return COORD_PREFIX + name


def _extra_ports(ctx, fixed):
    return [p for p in ctx.node.attrs if p not in fixed and not p.startswith("_")]


class RemoteTrigger(Behavior):
    def __init__(self, session: BusClient, sender: str, counters):
        self.session = session
        self.sender = sender
        self.counters = counters

    def tick(self, ctx):
        name = ctx.get_input("name")
        if not name:
            ctx.report("RemoteTrigger needs a name")
            return FAILURE
        if ctx.has_port("payload"):
            payload = ctx.get_input("payload")
        else:
            payload = {p: ctx.get_input(p) for p in _extra_ports(ctx, _TRIGGER_PORTS)}
        seq = next(self.counters[name])
        try:
            self.session.publish(coord_channel(name),
                                 {"sender": self.sender, "seq": seq, "payload": payload})
        except BusError as exc:
            ctx.report(f"RemoteTrigger {name}: {exc}")
            return FAILURE
        return SUCCESS


class RemoteWait(Behavior):
    """Running until a signal arrives after activation, Failure after timeout_ms."""

    def __init__(self, session: BusClient):
        self.session = session
        self.sub = None
        self.started = None

    def _reset(self):
        if self.sub is not None:
            try:
                self.sub.close()
            except BusError:
                pass
        self.sub = None
        self.started = None

    def tick(self, ctx):
        if self.sub is None:
            name = ctx.get_input("name")
            if not name:
                ctx.report("RemoteWait needs a name")
                return FAILURE
            try:
                self.sub = self.session.subscribe(coord_channel(name))
            except BusError as exc:
                ctx.report(f"RemoteWait {name}: {exc}")
                return FAILURE
            self.started = ctx.now()
        if not self.session.connected:
            ctx.report("RemoteWait: bus connection lost")
            self._reset()
            return FAILURE
        signals = self.sub.drain()
        if signals:
            payload = signals[0].data.get("payload") if isinstance(signals[0].data, dict) else None
            ctx.set_output("payload", payload)
            if isinstance(payload, dict):
                for port in _extra_ports(ctx, _WAIT_PORTS):
                    if port in payload:
                        ctx.set_output(port, payload[port])
            self._reset()
            return SUCCESS
        try:
            timeout_ms = int(ctx.get_input("timeout_ms", 0))
        except (TypeError, ValueError):
            ctx.report("RemoteWait: timeout_ms is not an integer")
            self._reset()
            return FAILURE
        if (ctx.now() - self.started) * 1000 >= timeout_ms:
            self._reset()
            return FAILURE
        return RUNNING

    def halt(self):
        self._reset()


class _SharedCall(Behavior):
    def __init__(self, session: BusClient):
        self.session = session
        self.call = None

    def request(self, ctx) -> dict:
        raise NotImplementedError

    def on_reply(self, ctx, reply) -> bool:
        return reply.get("status") == "success"

    def tick(self, ctx):
        if self.call is None:
            try:
                self.call = self.session.call_async(SHARED_CHANNEL, self.request(ctx),
                                                    timeout=SHARED_TIMEOUT)
            except BusError as exc:
                ctx.report(f"{type(self).__name__}: {exc}")
                return FAILURE
            return RUNNING
        call = self.call
        if not call.future.done():
            if call.expired():
                self.halt()
                return FAILURE
            return RUNNING
        self.call = None
        try:
            reply = call.future.result()
        except BusError as exc:
            ctx.report(f"{type(self).__name__}: {exc}")
            return FAILURE
        return SUCCESS if isinstance(reply, dict) and self.on_reply(ctx, reply) else FAILURE

    def halt(self):
        if self.call is not None:
            self.call.cancel()
            self.call = None


class SharedSet(_SharedCall):
    def request(self, ctx):
        return {"op": "set", "key": ctx.get_input("key"), "value": ctx.get_input("value")}


class SharedGet(_SharedCall):
    def request(self, ctx):
        return {"op": "get", "key": ctx.get_input("key")}

    def on_reply(self, ctx, reply):
        if reply.get("status") != "success":
            return False
        ctx.set_output("value", reply.get("value"))
        return True


def coordination_bindings(session: BusClient, sender: str) -> dict:
    """Leaf factories for the coordination builtins, sharing one seq counter per name."""
    counters = defaultdict(lambda: itertools.count(1))
    bindings = {
        "RemoteTrigger": lambda spec: RemoteTrigger(session, sender, counters),
        "RemoteWait": lambda spec: RemoteWait(session),
        "SharedSet": lambda spec: SharedSet(session),
        "SharedGet": lambda spec: SharedGet(session),
    }
    assert set(bindings) == COORDINATION_BEHAVIORS
    return bindings


class SharedStore:
    """Instance-wide key/value store; mutations are serialized, last writer wins."""

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()

    def handle(self, request):
        if not isinstance(request, dict) or not isinstance(request.get("key"), str):
            return {"status": "failure", "error": "request needs op and key"}
        op, key = request.get("op"), request["key"]
        with self._lock:
            if op == "set":
                self._data[key] = request.get("value")
                return {"status": "success"}
            if op == "get":
                if key not in self._data:
                    return {"status": "failure", "error": f"unset key {key!r}"}
                return {"status": "success", "value": self._data[key]}
        return {"status": "failure", "error": f"unknown op {op!r}"}

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._data)

    def serve(self, session: BusClient):
        return session.serve(SHARED_CHANNEL, self.handle)
