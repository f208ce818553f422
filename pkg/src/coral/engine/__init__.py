"""Behavior-tree execution: tick semantics, blackboards, leaf contract."""

from coral.engine.blackboard import Blackboard
from coral.engine.leaf import Behavior, FunctionBehavior, TickContext
from coral.engine.runtime import (
    DEFAULT_TICK_PERIOD,
    BindingError,
    DiagnosticRecord,
    TreeRuntime,
    create_runtime,
    halt_tree,
    run_tree,
    tick_root,
)
from coral.engine.status import FAILURE, IDLE, RUNNING, SUCCESS, Status

__all__ = [
    "Blackboard", "Behavior", "FunctionBehavior", "TickContext",
    "DEFAULT_TICK_PERIOD", "BindingError", "DiagnosticRecord", "TreeRuntime",
    "create_runtime", "halt_tree", "run_tree", "tick_root",
    "FAILURE", "IDLE", "RUNNING", "SUCCESS", "Status",
]
