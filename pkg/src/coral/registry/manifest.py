"""Behavior manifests: what a skillset offers and how to invoke it over the bus.

JSON shape::

    {"manifest_version": 1, "skillset": "gripper",
     "behaviors": [{"name": "Grasp", "kind": "action",
                    "ports": [{"name": "force", "direction": "out", "doc": "..."}],
                    "binding": {"type": "service", "channel": "gripper/grasp",
                                "timeout_ms": 5000, "request": {}, "response": {"force": "force"},
                                "status_field": "status"}}]}

Binding types:

* ``service``: ``request`` maps request field -> input port, ``response`` maps
  reply field -> output port; ``status_field`` of the reply must be
  ``"success"`` or ``"failure"``.
* ``publish``: ``payload`` maps message field -> input port.
* ``poll_topic``: condition on the latest message of ``channel``; true when
  ``field`` is truthy (or the whole message, when ``field`` is empty).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

from coral.errors import ConfigError

MANIFEST_VERSION = 1
BINDING_TYPES = ("service", "publish", "poll_topic")
_CHANNEL = re.compile(r"^[a-z0-9_/]+$")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ManifestError(ConfigError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class Port:
    name: str
    direction: str = "in"
    doc: str = ""


@dataclass(frozen=True)
class Binding:
    type: str
    channel: str
    timeout_ms: int = 5000
    request: dict = field(default_factory=dict)
    response: dict = field(default_factory=dict)
    status_field: str = "status"
    payload: dict = field(default_factory=dict)
    field: str = ""

    def to_dict(self) -> dict:
        if self.type == "service":
            return {"type": "service", "channel": self.channel, "timeout_ms": self.timeout_ms,
                    "request": dict(self.request), "response": dict(self.response),
                    "status_field": self.status_field}
        if self.type == "publish":
            return {"type": "publish", "channel": self.channel, "payload": dict(self.payload)}
        return {"type": "poll_topic", "channel": self.channel, "field": self.field}


@dataclass(frozen=True)
class BehaviorDecl:
    name: str
    binding: Binding
    kind: str = "action"
    ports: tuple = ()

    def port(self, name: str) -> Port | None:
        return next((p for p in self.ports if p.name == name), None)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind,
                "ports": [{"name": p.name, "direction": p.direction, "doc": p.doc} for p in self.ports],
                "binding": self.binding.to_dict()}


@dataclass(frozen=True)
class BehaviorManifest:
    skillset: str
    behaviors: tuple = ()
    manifest_version: int = MANIFEST_VERSION

    def names(self) -> set[str]:
        return {b.name for b in self.behaviors}

    def get(self, name: str) -> BehaviorDecl | None:
        return next((b for b in self.behaviors if b.name == name), None)

    def to_dict(self) -> dict:
        return {"manifest_version": self.manifest_version, "skillset": self.skillset,
                "behaviors": [b.to_dict() for b in self.behaviors]}


# -- construction helpers (used by skillsets) ----------------------------------------

def ports(*specs) -> tuple:
    """``ports(("goal", "in"), ("result", "out", "doc"))``"""
    return tuple(Port(*s) for s in specs)


def service(channel, request=None, response=None, timeout_ms=5000, status_field="status") -> Binding:
    return Binding("service", channel, timeout_ms, dict(request or {}), dict(response or {}),
                   status_field)


def publish(channel, payload=None) -> Binding:
    return Binding("publish", channel, payload=dict(payload or {}))


def poll_topic(channel, field="") -> Binding:
    return Binding("poll_topic", channel, field=field)


# -- validation and (de)serialization --------------------------------------------------

def _require(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise ManifestError(f"{path}.{key}" if path else key, "missing")
    value = obj[key]
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ManifestError(f"{path}.{key}" if path else key,
                            f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _str_map(obj: dict, key: str, path: str) -> dict:
    value = obj.get(key, {})
    where = f"{path}.{key}"
    if not isinstance(value, dict):
        raise ManifestError(where, "expected an object")
    for k, v in value.items():
        if not isinstance(v, str) or not v:
            raise ManifestError(f"{where}.{k}", "expected a port name")
    return dict(value)


def _parse_binding(obj: Any, path: str) -> Binding:
    if not isinstance(obj, dict):
        raise ManifestError(path, "expected an object")
    btype = _require(obj, "type", str, path)
    if btype not in BINDING_TYPES:
        raise ManifestError(f"{path}.type", f"unknown binding type {btype!r}")
    channel = _require(obj, "channel", str, path)
    if not _CHANNEL.match(channel):
        raise ManifestError(f"{path}.channel", f"invalid channel {channel!r}")
    if btype == "service":
        timeout = obj.get("timeout_ms", 5000)
        if isinstance(timeout, bool) or not isinstance(timeout, int) or timeout <= 0:
            raise ManifestError(f"{path}.timeout_ms", "expected a positive integer")
        status = obj.get("status_field", "status")
        if not isinstance(status, str) or not status:
            raise ManifestError(f"{path}.status_field", "expected a field name")
        return service(channel, _str_map(obj, "request", path), _str_map(obj, "response", path),
                       timeout, status)
    if btype == "publish":
        return publish(channel, _str_map(obj, "payload", path))
    fld = obj.get("field", "")
    if not isinstance(fld, str):
        raise ManifestError(f"{path}.field", "expected a string")
    return poll_topic(channel, fld)


def _check_decl(decl: BehaviorDecl, path: str) -> None:
    b = decl.binding
    if decl.kind == "condition" and b.type == "publish":
        raise ManifestError(f"{path}.binding.type", "a condition cannot use a publish binding")
    uses = [("request", b.request, "in"), ("payload", b.payload, "in"), ("response", b.response, "out")]
    for section, mapping, direction in uses:
        for fld, port_name in mapping.items():
            port = decl.port(port_name)
            where = f"{path}.binding.{section}.{fld}"
            if port is None:
                raise ManifestError(where, f"references undeclared port {port_name!r}")
            if port.direction != direction:
                raise ManifestError(where, f"port {port_name!r} is not an {direction} port")


def manifest_from_dict(obj: Any) -> BehaviorManifest:
    if not isinstance(obj, dict):
        raise ManifestError("", "manifest must be a JSON object")
    version = _require(obj, "manifest_version", int, "")
    if version != MANIFEST_VERSION:
        raise ManifestError("manifest_version", f"unsupported version {version}")
    skillset = _require(obj, "skillset", str, "")
    raw = _require(obj, "behaviors", list, "")
    behaviors, seen = [], set()
    for i, item in enumerate(raw):
        path = f"behaviors[{i}]"
        if not isinstance(item, dict):
            raise ManifestError(path, "expected an object")
        name = _require(item, "name", str, path)
        if not _NAME.match(name):
            raise ManifestError(f"{path}.name", f"invalid behavior name {name!r}")
        if name in seen:
            raise ManifestError(f"{path}.name", f"duplicate behavior {name!r}")
        seen.add(name)
        kind = item.get("kind", "action")
        if kind not in ("action", "condition"):
            raise ManifestError(f"{path}.kind", f"unknown kind {kind!r}")
        plist = []
        for j, p in enumerate(item.get("ports", [])):
            ppath = f"{path}.ports[{j}]"
            if not isinstance(p, dict):
                raise ManifestError(ppath, "expected an object")
            pname = _require(p, "name", str, ppath)
            direction = p.get("direction", "in")
            if direction not in ("in", "out"):
                raise ManifestError(f"{ppath}.direction", f"expected in or out, got {direction!r}")
            plist.append(Port(pname, direction, str(p.get("doc", ""))))
        decl = BehaviorDecl(name, _parse_binding(item.get("binding"), f"{path}.binding"), kind,
                            tuple(plist))
        _check_decl(decl, path)
        behaviors.append(decl)
    return BehaviorManifest(skillset, tuple(behaviors), version)


def manifest_parse(text: str | bytes) -> BehaviorManifest:
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise ManifestError("", f"not JSON: {exc}") from None
    return manifest_from_dict(obj)


def manifest_serialize(m: BehaviorManifest) -> str:
    return json.dumps(m.to_dict(), indent=2, sort_keys=False)


def validate_manifest(m: BehaviorManifest) -> BehaviorManifest:
    """Round-trip through the dict form, raising on any schema problem."""
    return manifest_from_dict(m.to_dict())
