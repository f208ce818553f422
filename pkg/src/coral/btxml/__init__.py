"""Behavior-tree definitions in the BehaviorTree.CPP XML dialect."""

from coral.btxml.expand import SubtreeError, expand_subtrees, is_expanded
from coral.btxml.nodes import (
    BUILTIN_LEAVES,
    COMPOSITES,
    COORDINATION_BEHAVIORS,
    DECORATORS,
    Diagnostic,
    NodeSpec,
    TreeSpec,
    port_reference,
)
from coral.btxml.parser import TreeParseError, load_tree, parse_tree_xml, serialize_tree_xml
from coral.btxml.validate import validate_tree

__all__ = [
    "SubtreeError", "expand_subtrees", "is_expanded",
    "BUILTIN_LEAVES", "COMPOSITES", "COORDINATION_BEHAVIORS", "DECORATORS",
    "Diagnostic", "NodeSpec", "TreeSpec", "port_reference",
    "TreeParseError", "load_tree", "parse_tree_xml", "serialize_tree_xml",
    "validate_tree",
]
