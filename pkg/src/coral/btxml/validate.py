from __future__ import annotations

from coral.btxml.nodes import (
    BUILTIN_LEAVES,
    COORDINATION_BEHAVIORS,
    SUBTREE,
    USER_LEAVES,
    Diagnostic,
    TreeSpec,
)

# attribute -> (lowest allowed value, whether -1 means "unbounded")
_NUMERIC_ATTRS = {
    "Retry": ("num_attempts", 1, True),
    "Repeat": ("num_cycles", 1, True),
    "Timeout": ("msec", 0, False),
    "Sleep": ("msec", 0, False),
}


def _int(value):
    try:
        return int(str(value).strip())
    except ValueError:
        return None


def validate_tree(spec: TreeSpec, known_behaviors=frozenset()) -> list[Diagnostic]:
    """Static checks; an empty list means the tree can be bound and run.

    Leaves are resolvable if their name is in ``known_behaviors`` (the
    union of exported behavior names), a builtin, or a coordination leaf.
    """
    known = set(known_behaviors) | BUILTIN_LEAVES | COORDINATION_BEHAVIORS
    diags: list[Diagnostic] = []

    def check_refs(tree_id, stack):
        for path, node in spec.trees[tree_id].walk(tree_id):
            if node.kind != SUBTREE or node.children:
                continue
            if node.name not in spec.trees:
                diags.append(Diagnostic(path, f"SubTree references unknown tree {node.name!r}"))
            elif node.name in stack:
                diags.append(Diagnostic(path, "cyclic subtree inclusion: "
                                        + " -> ".join(stack + (node.name,))))
            else:
                check_refs(node.name, stack + (node.name,))

    check_refs(spec.main_tree_id, (spec.main_tree_id,))

    for tree_id, root in spec.trees.items():
        for path, node in root.walk(tree_id):
            if node.kind in USER_LEAVES and node.name not in known:
                diags.append(Diagnostic(path, f"no running skillset exports behavior {node.name!r}"))
            elif node.kind == "Parallel":
                n = len(node.children)
                raw = node.attrs.get("success_count")
                if raw is not None:
                    k = _int(raw)
                    if k is None or not 1 <= k <= n:
                        diags.append(Diagnostic(
                            path, f"Parallel success_count={raw!r} outside [1, {n}]"))
            elif node.kind in _NUMERIC_ATTRS:
                attr, low, unbounded = _NUMERIC_ATTRS[node.kind]
                raw = node.attrs.get(attr)
                if raw is None:
                    diags.append(Diagnostic(path, f"{node.kind} requires attribute {attr}"))
                    continue
                if raw.strip().startswith("{"):
                    continue  # resolved from the blackboard at runtime
                v = _int(raw)
                if v is None or (v < low and not (unbounded and v == -1)):
                    diags.append(Diagnostic(path, f"{node.kind} {attr}={raw!r} is invalid"))
            elif node.kind == "SetBlackboard":
                if "output_key" not in node.attrs or "value" not in node.attrs:
                    diags.append(Diagnostic(path, "SetBlackboard requires value and output_key"))
    return diags
