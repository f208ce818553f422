"""Compose-file and params-file parsing.

A compose file is ordinary compose YAML. Coral reads ``services`` with their
``command``/``image``/``environment``/``depends_on``/``restart`` keys and its own
``x-coral`` blocks::

    x-coral: {instance_id: demo_a, bus: "127.0.0.1:7450", readiness_deadline: 30}
    services:
      executor:
        x-coral: {role: executor, tree: demo_a_tree.xml}
        depends_on: [slam_server]
"""

from __future__ import annotations

import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from coral.bus.broker import parse_addr
from coral.errors import ConfigError

ROLES = ("executor", "skillset", "driver")
RESTART_POLICIES = ("never", "on-failure")
MAX_RESTARTS = 3
DEFAULT_READINESS = 30.0
DEFAULT_TICK_MS = 50
_SERVICE_NAME = re.compile(r"^[a-z0-9_]+$")
_PARAM_KEY = re.compile(r"^[A-Za-z0-9_.]+$")
_INSTANCE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")
_DURATION = re.compile(r"^\s*(\d+(?:\.\d*)?)\s*(ms|s|m)?\s*$")


class _UniqueKeyLoader(yaml.SafeLoader):
    """SafeLoader that refuses duplicate mapping keys instead of keeping the last."""


def _construct_mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        seen.add(key)
    return yaml.SafeLoader.construct_mapping(loader, node, deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_yaml(text: str, what: str):
    try:
        return yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{what}: invalid YAML: {exc}") from None


def parse_duration(value, where: str) -> float:
    """Seconds from ``30``, ``2.5``, ``"500ms"``, ``"30s"`` or ``"1m"``."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a duration")
    if isinstance(value, (int, float)):
        if value <= 0:
            raise ConfigError(f"{where}: must be positive")
        return float(value)
    m = _DURATION.match(str(value))
    if not m:
        raise ConfigError(f"{where}: bad duration {value!r}")
    n = float(m.group(1)) * {"ms": 0.001, "s": 1.0, "m": 60.0, None: 1.0}[m.group(2)]
    if n <= 0:
        raise ConfigError(f"{where}: must be positive")
    return n


@dataclass
class ComponentSpec:
    name: str
    role: str
    command: list = field(default_factory=list)
    image: str | None = None
    tree: Path | None = None
    params_ns: str = ""
    env: dict = field(default_factory=dict)
    depends_on: list = field(default_factory=list)
    restart: str = "never"
    tick_ms: int = DEFAULT_TICK_MS
    exports: list | None = None

    def __post_init__(self):
        self.params_ns = self.params_ns or self.name


@dataclass
class InstanceConfig:
    instance_id: str
    bus: str
    components: list
    params_file: Path | None = None
    readiness_deadline: float = DEFAULT_READINESS
    headless: bool = False
    relay: dict | None = None
    base_dir: Path = field(default_factory=Path.cwd)
    source: Path | None = None

    def component(self, name: str) -> ComponentSpec:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def by_role(self, role: str) -> list:
        return [c for c in self.components if c.role == role]

    def start_order(self) -> list:
        """Components sorted so each comes after its dependencies (file order otherwise)."""
        done, out = set(), []
        pending = list(self.components)
        while pending:
            for c in pending:
                if all(d in done for d in c.depends_on):
                    out.append(c)
                    done.add(c.name)
                    pending.remove(c)
                    break
        return out


def _command(value, where):
    if value is None:
        return []
    if isinstance(value, str):
        try:
            return shlex.split(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if isinstance(value, list) and all(isinstance(v, (str, int, float)) for v in value):
        return [str(v) for v in value]
    raise ConfigError(f"{where}: expected a string or a list of strings")


def _environment(value, where):
    if value is None:
        return {}
    if isinstance(value, dict):
        return {str(k): "" if v is None else str(v) for k, v in value.items()}
    if isinstance(value, list):
        env = {}
        for item in value:
            key, _, val = str(item).partition("=")
            env[key] = val
        return env
    raise ConfigError(f"{where}: expected a mapping or a list of KEY=VALUE")


def _depends(value, where):
    if value is None:
        return []
    if isinstance(value, dict):
        return [str(k) for k in value]
    if isinstance(value, list):
        return [str(v) for v in value]
    raise ConfigError(f"{where}: expected a list or mapping")


def _find_cycle(components) -> list | None:
    graph = {c.name: c.depends_on for c in components}
    state = {}

    def visit(n, stack):
        state[n] = 1
        stack.append(n)
        for d in graph[n]:
            if state.get(d) == 1:
                return stack[stack.index(d):] + [d]
            if d not in state:
                found = visit(d, stack)
                if found:
                    return found
        stack.pop()
        state[n] = 2
        return None

    for name in graph:
        if name not in state:
            found = visit(name, [])
            if found:
                return found
    return None


def _service(name, raw, base: Path) -> ComponentSpec:
    where = f"services.{name}"
    if not _SERVICE_NAME.match(str(name)):
        raise ConfigError(f"{where}: service names must match [a-z0-9_]+")
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    ext = raw.get("x-coral")
    if not isinstance(ext, dict) or "role" not in ext:
        raise ConfigError(f"{where}: missing x-coral.role")
    role = ext["role"]
    if role not in ROLES:
        raise ConfigError(f"{where}: unknown role {role!r} (expected one of {', '.join(ROLES)})")
    unknown = set(ext) - {"role", "tree", "params_ns", "restart", "tick_ms", "exports"}
    if unknown:
        raise ConfigError(f"{where}.x-coral: unknown keys {', '.join(sorted(unknown))}")

    tree = ext.get("tree")
    if role == "executor" and not tree:
        raise ConfigError(f"{where}: executor needs x-coral.tree")
    if role != "executor" and tree:
        raise ConfigError(f"{where}: only executors take a tree")

    command = _command(raw.get("command"), f"{where}.command")
    image = raw.get("image")
    if not command and not image and role != "executor":
        raise ConfigError(f"{where}: needs a command or an image")

    restart = ext.get("restart", raw.get("restart", "never"))
    if restart in ("no", False):
        restart = "never"
    if not isinstance(restart, str) or restart not in RESTART_POLICIES:
        raise ConfigError(f"{where}: restart must be never or on-failure, got {restart!r}")

    tick_ms = ext.get("tick_ms", DEFAULT_TICK_MS)
    if isinstance(tick_ms, bool) or not isinstance(tick_ms, int) or tick_ms <= 0:
        raise ConfigError(f"{where}: tick_ms must be a positive integer")

    exports = ext.get("exports")
    if exports is not None:
        if role != "skillset" or not isinstance(exports, list):
            raise ConfigError(f"{where}: exports is a list, allowed on skillsets only")
        exports = [str(e) for e in exports]

    return ComponentSpec(
        name=name, role=role, command=command, image=image,
        tree=(base / tree).resolve() if tree else None,
        params_ns=str(ext.get("params_ns") or name),
        env=_environment(raw.get("environment"), f"{where}.environment"),
        depends_on=_depends(raw.get("depends_on"), f"{where}.depends_on"),
        restart=restart, tick_ms=tick_ms, exports=exports)


def parse_compose(text: str, base_dir=None, source=None) -> InstanceConfig:
    base = Path(base_dir) if base_dir else Path.cwd()
    doc = load_yaml(text, str(source or "compose file"))
    if not isinstance(doc, dict):
        raise ConfigError("compose file must be a mapping")
    top = doc.get("x-coral") or {}
    if not isinstance(top, dict):
        raise ConfigError("x-coral: expected a mapping")
    services = doc.get("services") or {}
    if not isinstance(services, dict):
        raise ConfigError("services: expected a mapping")

    components = [_service(name, raw, base) for name, raw in services.items()]
    names = {c.name for c in components}
    for c in components:
        for d in c.depends_on:
            if d not in names:
                raise ConfigError(f"services.{c.name}.depends_on: unknown service {d!r}")
            if d == c.name:
                raise ConfigError(f"services.{c.name}.depends_on: depends on itself")
    cycle = _find_cycle(components)
    if cycle:
        raise ConfigError(f"dependency cycle: {' -> '.join(cycle)}")

    headless = bool(top.get("headless", False))
    if not headless and not any(c.role == "executor" for c in components):
        raise ConfigError("no executor service (set x-coral.headless: true to allow this)")

    bus = str(top.get("bus", "127.0.0.1:7447"))
    try:
        parse_addr(bus)
    except ValueError as exc:
        raise ConfigError(f"x-coral.bus: {exc}") from None

    default_id = Path(source).stem if source else "coral"
    instance_id = str(top.get("instance_id", default_id))
    if not _INSTANCE_ID.match(instance_id):
        raise ConfigError(f"x-coral.instance_id: invalid id {instance_id!r}")

    relay = top.get("relay")
    if relay is not None:
        if not isinstance(relay, dict) or "peer" not in relay:
            raise ConfigError("x-coral.relay: needs a peer address")
        try:
            parse_addr(str(relay["peer"]))
        except ValueError as exc:
            raise ConfigError(f"x-coral.relay.peer: {exc}") from None
        relay = {"peer": str(relay["peer"]), "prefix": str(relay.get("prefix", "coral/coord/"))}

    params_file = top.get("params")
    return InstanceConfig(
        instance_id=instance_id, bus=bus, components=components,
        params_file=(base / params_file).resolve() if params_file else None,
        readiness_deadline=parse_duration(top.get("readiness_deadline", DEFAULT_READINESS),
                                          "x-coral.readiness_deadline"),
        headless=headless, relay=relay, base_dir=base, source=Path(source) if source else None)


def load_compose(path) -> InstanceConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read compose file {path}: {exc.strerror}") from None
    return parse_compose(text, path.resolve().parent, path)


def _flatten(prefix: str, value, out: dict, where: str) -> None:
    if isinstance(value, dict) and value:
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out, where)
        return
    if not _PARAM_KEY.match(prefix):
        raise ConfigError(f"{where}: bad parameter key {prefix!r}")
    out[prefix] = value


def parse_params(text: str) -> dict:
    """``{component: {parameters | ros__parameters: {...}}}`` to flat per-component maps."""
    doc = load_yaml(text, "params file")
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("params file must be a mapping")
    out = {}
    for comp, body in doc.items():
        where = f"params.{comp}"
        if body is None:
            out[str(comp)] = {}
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{where}: expected a mapping")
        keys = set(body) & {"parameters", "ros__parameters"}
        if len(keys) != 1 or set(body) - keys:
            raise ConfigError(f"{where}: expected exactly one of parameters or ros__parameters")
        inner = body[keys.pop()] or {}
        if not isinstance(inner, dict):
            raise ConfigError(f"{where}: parameters must be a mapping")
        flat = {}
        _flatten("", inner, flat, where)
        out[str(comp)] = flat
    return out


def load_params(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        return parse_params(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read params file {path}: {exc.strerror}") from None
