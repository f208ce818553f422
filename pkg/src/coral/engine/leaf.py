from __future__ import annotations

from typing import TYPE_CHECKING, Any, Callable

from coral.btxml.nodes import NodeSpec, port_reference
from coral.engine.status import FAILURE, SUCCESS, Status

if TYPE_CHECKING:
    from coral.engine.blackboard import Blackboard
    from coral.engine.runtime import TreeRuntime


class TickContext:
    """What a leaf sees of the tree: its ports, its blackboard scope, the clock."""

    def __init__(self, node: NodeSpec, path: str, blackboard: "Blackboard", runtime: "TreeRuntime"):
        self.node = node
        self.path = path
        self.blackboard = blackboard
        self.runtime = runtime

    def now(self) -> float:
        return self.runtime.clock()

    def has_port(self, port: str) -> bool:
        return port in self.node.attrs

    def get_input(self, port: str, default: Any = None) -> Any:
        raw = self.node.attrs.get(port)
        if raw is None:
            return default
        key = port_reference(raw)
        if key is None:
            return raw
        return self.blackboard.get(key, default)

    def set_output(self, port: str, value: Any) -> bool:
        """Write through an output port. Returns False when the port is unwired."""
        raw = self.node.attrs.get(port)
        if raw is None:
            return False
        key = port_reference(raw) or raw.strip()
        self.blackboard.set(key, value)
        return True

    def report(self, message: str) -> None:
        self.runtime.record(self.path, message)


class Behavior:
    """A leaf's executable part. ``tick`` may return RUNNING across ticks."""

    def tick(self, ctx: TickContext) -> Status:
        raise NotImplementedError

    def halt(self) -> None:
        pass


class FunctionBehavior(Behavior):
    """Wrap a synchronous callable ``fn(ctx) -> bool | Status``."""

    def __init__(self, fn: Callable[[TickContext], Any]):
        self.fn = fn

    def tick(self, ctx):
        result = self.fn(ctx)
        if isinstance(result, Status):
            return result
        return SUCCESS if result else FAILURE


# name -> factory(node spec) -> Behavior
Bindings = dict
