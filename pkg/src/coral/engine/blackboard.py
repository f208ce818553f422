from __future__ import annotations

import threading

from coral.btxml.nodes import port_reference

_MISSING = object()


class Blackboard:
    """One key/value scope, optionally remapping keys into its parent.

    A remapped key reads and writes the parent's key it is mapped to.
    Other keys are local to this scope unless ``autoremap`` is set, in
    which case reads fall back to the parent when the key is not local.
    """

    def __init__(self, parent: "Blackboard | None" = None, remaps: dict | None = None,
                 autoremap: bool = False):
        self.parent = parent
        self.remaps = dict(remaps or {})
        self.autoremap = autoremap and parent is not None
        self._values: dict = {}
        self._lock = threading.RLock()

    @classmethod
    def for_subtree(cls, parent: "Blackboard", attrs: dict) -> "Blackboard":
        """Scope for a SubTree node: ``{outer}`` values remap, literals seed."""
        remaps, seeds = {}, {}
        autoremap = str(attrs.get("_autoremap", "false")).lower() == "true"
        for key, value in attrs.items():
            if key.startswith("_") or key in ("name", "ID"):
                continue
            outer = port_reference(value)
            if outer is not None:
                remaps[key] = outer
            else:
                seeds[key] = value
        bb = cls(parent, remaps, autoremap)
        bb._values.update(seeds)
        return bb

    def resolve(self, key: str) -> tuple["Blackboard", str]:
        """Scope and key name that ``key`` finally refers to."""
        if key in self.remaps:
            return self.parent.resolve(self.remaps[key])
        return self, key

    def get(self, key: str, default=None):
        scope, name = self.resolve(key)
        with scope._lock:
            value = scope._values.get(name, _MISSING)
        if value is _MISSING:
            if scope.autoremap:
                return scope.parent.get(name, default)
            return default
        return value

    def has(self, key: str) -> bool:
        return self.get(key, _MISSING) is not _MISSING

    def set(self, key: str, value) -> None:
        scope, name = self.resolve(key)
        if scope.autoremap and name not in scope._values and scope.parent.has(name):
            scope.parent.set(name, value)
            return
        with scope._lock:
            scope._values[name] = value

    def update(self, values: dict) -> None:
        for k, v in values.items():
            self.set(k, v)

    def unset(self, key: str) -> None:
        scope, name = self.resolve(key)
        with scope._lock:
            scope._values.pop(name, None)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._values)
