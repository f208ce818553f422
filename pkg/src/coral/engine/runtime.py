"""Tick-driven execution of an expanded behavior tree."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from coral.btxml import expand_subtrees, is_expanded, validate_tree
from coral.btxml.nodes import BUILTIN_LEAVES, SUBTREE, USER_LEAVES, NodeSpec, TreeSpec, port_reference
from coral.engine.blackboard import Blackboard
from coral.engine.leaf import Behavior, TickContext
from coral.engine.status import FAILURE, IDLE, RUNNING, SUCCESS, Status
from coral.errors import ConfigError

log = logging.getLogger("coral.engine")

DEFAULT_TICK_PERIOD = 0.05


class BindingError(ConfigError):
    def __init__(self, message: str, names=()):
        super().__init__(message)
        self.names = sorted(names)


class Node:
    def __init__(self, spec: NodeSpec, path: str, rt: "TreeRuntime", bb: Blackboard):
        self.spec = spec
        self.path = path
        self.rt = rt
        self.bb = bb
        self.status = IDLE
        self.children: list[Node] = []
        self._literals: dict[str, int] = {}

    def tick(self) -> Status:
        try:
            status = self._tick()
        except Exception as exc:  # tick totality: errors become Failure
            self.rt.record(self.path, f"{type(exc).__name__}: {exc}")
            try:
                self._halt()
            except Exception:
                pass
            status = FAILURE
        self.status = status
        if self.rt.trace is not None:
            self.rt.trace.append((self.path, status))
        return status

    def halt(self) -> None:
        # an Idle node has no running descendants and no memory to clear
        if self.status is IDLE:
            return
        self._halt()
        self.status = IDLE

    def _tick(self) -> Status:
        raise NotImplementedError

    def _halt(self) -> None:
        for child in self.children:
            child.halt()

    def halt_children(self, start: int = 0) -> None:
        for child in self.children[start:]:
            child.halt()

    def attr_int(self, name: str, default=None) -> int:
        cached = self._literals.get(name)
        if cached is not None:
            return cached
        raw = self.spec.attrs.get(name)
        if raw is None:
            if default is None:
                raise ValueError(f"{self.spec.kind} needs attribute {name}")
            return default
        key = port_reference(raw)
        if key is not None:
            return int(str(self.bb.get(key)).strip())
        value = self._literals[name] = int(raw.strip())
        return value


class Sequence(Node):
    def __init__(self, *a):
        super().__init__(*a)
        self.index = 0

    def _tick(self):
        while self.index < len(self.children):
            status = self.children[self.index].tick()
            if status is RUNNING:
                return RUNNING
            if status is FAILURE:
                self._halt()
                return FAILURE
            self.index += 1
        self._halt()
        return SUCCESS

    def _halt(self):
        self.halt_children()
        self.index = 0


class Fallback(Sequence):
    def _tick(self):
        while self.index < len(self.children):
            status = self.children[self.index].tick()
            if status is RUNNING:
                return RUNNING
            if status is SUCCESS:
                self._halt()
                return SUCCESS
            self.index += 1
        self._halt()
        return FAILURE


class ReactiveSequence(Node):
    # children that stop the scan: Failure ends it, Success lets it continue
    stop_on = FAILURE

    def _tick(self):
        for i, child in enumerate(self.children):
            status = child.tick()
            if status is RUNNING:
                # a later child may still be Running from an earlier tick
                self.halt_children(i + 1)
                return RUNNING
            if status is self.stop_on:
                self.halt_children()
                return status
        self.halt_children()
        return SUCCESS if self.stop_on is FAILURE else FAILURE


class ReactiveFallback(ReactiveSequence):
    stop_on = SUCCESS


class Parallel(Node):
    def __init__(self, *a):
        super().__init__(*a)
        self.finished: dict[int, Status] = {}

    def _tick(self):
        n = len(self.children)
        need = self.attr_int("success_count", n)
        if not 1 <= need <= n:
            raise ValueError(f"Parallel success_count={need} outside [1, {n}]")
        for i, child in enumerate(self.children):
            if i in self.finished:
                continue
            status = child.tick()
            if status is not RUNNING:
                self.finished[i] = status
        succeeded = sum(1 for s in self.finished.values() if s is SUCCESS)
        failed = len(self.finished) - succeeded
        if succeeded >= need:
            self._halt()
            return SUCCESS
        if failed > n - need:
            self._halt()
            return FAILURE
        return RUNNING

    def _halt(self):
        self.halt_children()
        self.finished.clear()


class Decorator(Node):
    @property
    def child(self) -> Node:
        return self.children[0]


class Inverter(Decorator):
    def _tick(self):
        status = self.child.tick()
        if status is RUNNING:
            return RUNNING
        self.child.halt()
        return FAILURE if status is SUCCESS else SUCCESS


class SubTreeNode(Decorator):
    def _tick(self):
        status = self.child.tick()
        if status is not RUNNING:
            self.child.halt()
        return status


class Retry(Decorator):
    """Re-run a failing child on later ticks, up to num_attempts tries (-1: forever)."""

    repeat_on = FAILURE
    attr = "num_attempts"

    def __init__(self, *a):
        super().__init__(*a)
        self.count = 0

    def _tick(self):
        limit = self.attr_int(self.attr)
        status = self.child.tick()
        if status is RUNNING:
            return RUNNING
        self.child.halt()
        if status == self.repeat_on:
            self.count += 1
            if limit == -1 or self.count < limit:
                return RUNNING
        self.count = 0
        return status

    def _halt(self):
        super()._halt()
        self.count = 0


class Repeat(Retry):
    repeat_on = SUCCESS
    attr = "num_cycles"


class Timeout(Decorator):
    def __init__(self, *a):
        super().__init__(*a)
        self.deadline = None

    def _tick(self):
        now = self.rt.clock()
        if self.deadline is None:
            self.deadline = now + self.attr_int("msec") / 1000.0
        elif now >= self.deadline:
            self._halt()
            return FAILURE
        status = self.child.tick()
        if status is not RUNNING:
            self._halt()
        return status

    def _halt(self):
        super()._halt()
        self.deadline = None


class KeepRunningUntilFailure(Decorator):
    def _tick(self):
        status = self.child.tick()
        if status is FAILURE:
            self.child.halt()
            return FAILURE
        if status is SUCCESS:
            self.child.halt()
        return RUNNING


class Leaf(Node):
    def __init__(self, spec, path, rt, bb, behavior: Behavior):
        super().__init__(spec, path, rt, bb)
        self.behavior = behavior
        self.ctx = TickContext(spec, path, bb, rt)

    def _tick(self):
        status = self.behavior.tick(self.ctx)
        if status is RUNNING or status is SUCCESS or status is FAILURE:
            return status
        if status in (RUNNING, SUCCESS, FAILURE):
            return Status(status)
        self.rt.record(self.path, f"leaf returned invalid status {status!r}")
        return FAILURE

    def halt(self):
        if self.status is RUNNING:
            try:
                self.behavior.halt()
            except Exception as exc:
                self.rt.record(self.path, f"halt failed: {exc}")
        self.status = IDLE


class _AlwaysSuccess(Behavior):
    def tick(self, ctx):
        return SUCCESS


class _AlwaysFailure(Behavior):
    def tick(self, ctx):
        return FAILURE


class _Sleep(Behavior):
    def __init__(self):
        self.deadline = None

    def tick(self, ctx):
        now = ctx.now()
        if self.deadline is None:
            self.deadline = now + int(str(ctx.get_input("msec", 0))) / 1000.0
        if now >= self.deadline:
            self.deadline = None
            return SUCCESS
        return RUNNING

    def halt(self):
        self.deadline = None


class _SetBlackboard(Behavior):
    def tick(self, ctx):
        value = ctx.get_input("value")
        ctx.set_output("output_key", value)
        return SUCCESS


BUILTIN_BEHAVIORS = {
    "AlwaysSuccess": _AlwaysSuccess,
    "AlwaysFailure": _AlwaysFailure,
    "Sleep": _Sleep,
    "SetBlackboard": _SetBlackboard,
}

_NODE_TYPES = {
    "Sequence": Sequence,
    "ReactiveSequence": ReactiveSequence,
    "Fallback": Fallback,
    "ReactiveFallback": ReactiveFallback,
    "Parallel": Parallel,
    "Inverter": Inverter,
    "Retry": Retry,
    "Repeat": Repeat,
    "Timeout": Timeout,
    "KeepRunningUntilFailure": KeepRunningUntilFailure,
    SUBTREE: SubTreeNode,
}


@dataclass(frozen=True)
class DiagnosticRecord:
    tick: int
    path: str
    message: str


@dataclass
class TreeRuntime:
    spec: TreeSpec
    blackboard: Blackboard
    tick_period: float = DEFAULT_TICK_PERIOD
    clock: Callable[[], float] = time.monotonic
    root: Node | None = None
    nodes: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    tick_count: int = 0
    # when a list, every status a node returns is appended as (path, status)
    trace: list | None = None

    @property
    def status(self) -> Status:
        return self.root.status

    def record(self, path: str, message: str) -> None:
        self.diagnostics.append(DiagnosticRecord(self.tick_count, path, message))
        log.warning("tick %d %s: %s", self.tick_count, path, message)

    def scope(self, path: str) -> Blackboard:
        """Blackboard scope visible to the node at ``path``."""
        try:
            return self.nodes[path].bb
        except KeyError:
            raise KeyError(f"no node at path {path!r}") from None

    def read(self, path: str, key: str, default=None):
        return self.scope(path).get(key, default)

    def write(self, path: str, key: str, value) -> None:
        self.scope(path).set(key, value)

    def statuses(self) -> dict:
        return {p: n.status for p, n in self.nodes.items()}


def _build(spec: NodeSpec, path: str, rt: TreeRuntime, bb: Blackboard, bindings) -> Node:
    if spec.kind in USER_LEAVES or spec.kind in BUILTIN_LEAVES:
        factory = bindings.get(spec.name) if spec.kind in USER_LEAVES else BUILTIN_BEHAVIORS[spec.kind]
        behavior = factory(spec) if spec.kind in USER_LEAVES else factory()
        node = Leaf(spec, path, rt, bb, behavior)
    else:
        if spec.kind == SUBTREE:
            bb = Blackboard.for_subtree(bb, spec.attrs)
        node = _NODE_TYPES[spec.kind](spec, path, rt, bb)
        node.children = [_build(c, f"{path}/{c.label}[{i}]", rt, bb, bindings)
                         for i, c in enumerate(spec.children)]
    rt.nodes[path] = node
    return node


def create_runtime(spec: TreeSpec, bindings: dict | None = None, tick_period: float = DEFAULT_TICK_PERIOD,
                   blackboard: Blackboard | None = None,
                   clock: Callable[[], float] = time.monotonic) -> TreeRuntime:
    """Instantiate a runtime with every node Idle.

    ``bindings`` maps behavior names to ``factory(node_spec) -> Behavior``.
    Raises BindingError naming every leaf without a binding.
    """
    bindings = dict(bindings or {})
    if not is_expanded(spec):
        spec = expand_subtrees(spec)
    unbound = sorted({n.name for _, n in spec.main.walk()
                      if n.kind in USER_LEAVES and n.name not in bindings})
    if unbound:
        raise BindingError(f"unbound behaviors: {', '.join(unbound)}", unbound)
    problems = [d for d in validate_tree(spec, set(bindings)) if "exports behavior" not in d.message]
    if problems:
        raise ConfigError("; ".join(str(d) for d in problems))
    rt = TreeRuntime(spec=spec, blackboard=blackboard or Blackboard(), tick_period=tick_period,
                     clock=clock)
    rt.root = _build(spec.main, spec.main_tree_id, rt, rt.blackboard, bindings)
    return rt


def tick_root(rt: TreeRuntime) -> Status:
    rt.tick_count += 1
    return rt.root.tick()


def halt_tree(rt: TreeRuntime) -> None:
    # halting recurses through every node and leaves each one Idle
    rt.root.halt()


def run_tree(rt: TreeRuntime, stop: threading.Event | None = None, max_ticks: int | None = None,
             on_tick: Callable[[int, Status], None] | None = None,
             sleep: Callable[[float], None] = time.sleep) -> Status:
    """Tick at a fixed rate until the root completes, ``stop`` is set, or max_ticks.

    Returns the last root status; a stop request halts the tree first.
    """
    next_at = time.monotonic()
    status = rt.status
    while True:
        if stop is not None and stop.is_set():
            halt_tree(rt)
            return status
        status = tick_root(rt)
        if on_tick is not None:
            on_tick(rt.tick_count, status)
        if status is not RUNNING:
            return status
        if max_ticks is not None and rt.tick_count >= max_ticks:
            return status
        next_at += rt.tick_period
        delay = next_at - time.monotonic()
        if delay < 0:
            next_at = time.monotonic()  # overrun: do not try to catch up
            delay = 0
        if stop is not None:
            if stop.wait(delay):
                halt_tree(rt)
                return status
        elif delay:
            sleep(delay)
