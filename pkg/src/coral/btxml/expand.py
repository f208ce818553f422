from __future__ import annotations

import copy

from coral.btxml.nodes import SUBTREE, NodeSpec, TreeSpec
from coral.btxml.parser import TreeParseError


class SubtreeError(TreeParseError):
    pass


def expand_subtrees(spec: TreeSpec) -> TreeSpec:
    """Inline every SubTree reference of the main tree.

    Each SubTree node keeps its attributes (the port remapping) and gains
    a single child: a private copy of the referenced tree, itself expanded.
    The engine uses the SubTree node as a blackboard scope boundary.
    """

    def inline(node: NodeSpec, stack: tuple) -> NodeSpec:
        if node.kind == SUBTREE:
            target = node.name
            if target in stack:
                cycle = " -> ".join(stack + (target,))
                raise SubtreeError(f"cyclic subtree inclusion: {cycle}")
            if target not in spec.trees:
                raise SubtreeError(f"SubTree references unknown tree {target!r}")
            body = inline(spec.trees[target], stack + (target,))
            return NodeSpec(SUBTREE, target, dict(node.attrs), [body])
        out = NodeSpec(node.kind, node.name, dict(node.attrs))
        out.children = [inline(c, stack) for c in node.children]
        return out

    root = inline(spec.main, (spec.main_tree_id,))
    return TreeSpec(main_tree_id=spec.main_tree_id, trees={spec.main_tree_id: root},
                    source_path=spec.source_path, warnings=list(spec.warnings))


def is_expanded(spec: TreeSpec) -> bool:
    return all(n.children for _, n in spec.main.walk() if n.kind == SUBTREE)


def copy_spec(spec: TreeSpec) -> TreeSpec:
    return copy.deepcopy(spec)
