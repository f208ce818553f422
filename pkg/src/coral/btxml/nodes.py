from __future__ import annotations

import re
from dataclasses import dataclass, field

COMPOSITES = frozenset({"Sequence", "ReactiveSequence", "Fallback", "ReactiveFallback", "Parallel"})
DECORATORS = frozenset({"Inverter", "Retry", "Repeat", "Timeout", "KeepRunningUntilFailure"})
BUILTIN_LEAVES = frozenset({"AlwaysSuccess", "AlwaysFailure", "Sleep", "SetBlackboard"})
USER_LEAVES = frozenset({"Action", "Condition"})
SUBTREE = "SubTree"
KINDS = COMPOSITES | DECORATORS | BUILTIN_LEAVES | USER_LEAVES | {SUBTREE}

# Leaves every executor provides itself for cross-executor coordination.
COORDINATION_BEHAVIORS = frozenset({"RemoteTrigger", "RemoteWait", "SharedSet", "SharedGet"})

# Older tag spellings accepted on input; serialization uses the canonical kind.
TAG_ALIASES = {
    "RetryUntilSuccessful": "Retry",
    "RetryUntilSuccesful": "Retry",
}

_REF_RE = re.compile(r"^\{([^{}]+)\}$")


def port_reference(value: str) -> str | None:
    """Blackboard key for a ``{key}`` port value, None for a literal."""
    m = _REF_RE.match(value.strip()) if isinstance(value, str) else None
    return m.group(1) if m else None


@dataclass
class NodeSpec:
    kind: str
    name: str = ""
    attrs: dict = field(default_factory=dict)
    children: list = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return self.kind in USER_LEAVES or self.kind in BUILTIN_LEAVES

    @property
    def label(self) -> str:
        return self.name if self.kind in USER_LEAVES or self.kind == SUBTREE else self.kind

    def walk(self, path: str = ""):
        """Yield (path, node) pairs in pre-order."""
        here = path or self.label
        yield here, self
        for i, child in enumerate(self.children):
            yield from child.walk(f"{here}/{child.label}[{i}]")

    def leaves(self) -> list:
        return [n for _, n in self.walk() if not n.children and n.kind != SUBTREE]


@dataclass
class TreeSpec:
    main_tree_id: str
    trees: dict
    source_path: str = ""
    warnings: list = field(default_factory=list)

    @property
    def main(self) -> NodeSpec:
        return self.trees[self.main_tree_id]


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"
