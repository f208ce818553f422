"""Turn manifest declarations into executable leaves.

All leaves share the executor's bus session; nothing here knows any
particular skillset.
"""

from __future__ import annotations

import logging

from coral.bus import BusClient, BusError
from coral.engine import FAILURE, RUNNING, SUCCESS, Behavior
from coral.errors import ConfigError
from coral.registry.manifest import BehaviorDecl

log = logging.getLogger(__name__)


class BindError(ConfigError):
    def __init__(self, message: str, conflicts=None):
        super().__init__(message)
        self.conflicts = conflicts or {}


def _fill(template: dict, ctx) -> dict:
    out = {}
    for fld, port in template.items():
        value = ctx.get_input(port)
        if value is not None:
            out[fld] = value
    return out


class ServiceLeaf(Behavior):
    """Issue one asynchronous call per activation; Running until the reply."""

    def __init__(self, decl: BehaviorDecl, session: BusClient):
        self.decl = decl
        self.b = decl.binding
        self.session = session
        self.call = None

    def tick(self, ctx):
        if self.call is None:
            try:
                self.call = self.session.call_async(self.b.channel, _fill(self.b.request, ctx),
                                                    timeout=self.b.timeout_ms / 1000)
            except BusError as exc:
                ctx.report(f"{self.decl.name}: {exc}")
                return FAILURE
            return RUNNING
        call = self.call
        if not call.future.done():
            if call.expired():
                call.cancel()
                self.call = None
                ctx.report(f"{self.decl.name}: no reply within {self.b.timeout_ms} ms")
                return FAILURE
            return RUNNING
        self.call = None
        try:
            reply = call.future.result()
        except BusError as exc:
            ctx.report(f"{self.decl.name}: {exc}")
            return FAILURE
        if not isinstance(reply, dict):
            ctx.report(f"{self.decl.name}: reply is not an object")
            return FAILURE
        for fld, port in self.b.response.items():
            if fld in reply:
                ctx.set_output(port, reply[fld])
        status = reply.get(self.b.status_field)
        if status == "success":
            return SUCCESS
        if status != "failure":
            ctx.report(f"{self.decl.name}: bad status {status!r}")
        return FAILURE

    def halt(self):
        if self.call is not None:
            self.call.cancel()
            self.call = None


class PublishLeaf(Behavior):
    def __init__(self, decl: BehaviorDecl, session: BusClient):
        self.decl = decl
        self.session = session

    def tick(self, ctx):
        b = self.decl.binding
        try:
            self.session.publish(b.channel, _fill(b.payload, ctx))
        except BusError as exc:
            ctx.report(f"{self.decl.name}: {exc}")
            return FAILURE
        return SUCCESS


class PollLeaf(Behavior):
    """Condition on the latest message of a topic. Never Running."""

    def __init__(self, decl: BehaviorDecl, sub):
        self.decl = decl
        self.sub = sub

    def tick(self, ctx):
        latest = self.sub.latest
        if latest is None:
            return FAILURE
        fld = self.decl.binding.field
        if fld:
            value = latest.get(fld) if isinstance(latest, dict) else None
        else:
            value = latest
        return SUCCESS if value else FAILURE


def bind_leaves(manifests: dict, session: BusClient, reserved=()) -> dict:
    """Leaf factories for ``create_runtime``, one per declared behavior.

    Subscriptions for poll_topic conditions are opened here, before the
    first tick. A name declared twice (or shadowing a ``reserved`` name)
    is an error.
    """
    owners: dict[str, list[str]] = {}
    for name in reserved:
        owners.setdefault(name, []).append("<builtin>")
    for skillset in sorted(manifests):
        for decl in manifests[skillset].behaviors:
            owners.setdefault(decl.name, []).append(skillset)
    conflicts = {n: o for n, o in owners.items() if len(o) > 1}
    if conflicts:
        desc = "; ".join(f"{n} exported by {' and '.join(o)}" for n, o in sorted(conflicts.items()))
        raise BindError(f"conflicting behavior names: {desc}", conflicts)

    subs = {}
    bindings = {}
    for skillset in sorted(manifests):
        for decl in manifests[skillset].behaviors:
            btype = decl.binding.type
            if btype == "service":
                bindings[decl.name] = (lambda d: lambda spec: ServiceLeaf(d, session))(decl)
            elif btype == "publish":
                bindings[decl.name] = (lambda d: lambda spec: PublishLeaf(d, session))(decl)
            else:
                ch = decl.binding.channel
                if ch not in subs:
                    subs[ch] = session.subscribe(ch, callback=lambda env: None)
                bindings[decl.name] = (lambda d, s: lambda spec: PollLeaf(d, s))(decl, subs[ch])
    return bindings
