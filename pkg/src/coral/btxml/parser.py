"""BehaviorTree.CPP-style XML to TreeSpec, and back."""

from __future__ import annotations

import logging
import re
import xml.etree.ElementTree as ET
from pathlib import Path

from coral.btxml.nodes import (
    BUILTIN_LEAVES,
    COMPOSITES,
    DECORATORS,
    KINDS,
    SUBTREE,
    TAG_ALIASES,
    USER_LEAVES,
    NodeSpec,
    TreeSpec,
)
from coral.errors import ConfigError

log = logging.getLogger("coral.btxml")

_XML_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


class TreeParseError(ConfigError):
    pass


def _convert(elem: ET.Element, where: str) -> NodeSpec:
    tag = TAG_ALIASES.get(elem.tag, elem.tag)
    attrs = dict(elem.attrib)
    children = list(elem)
    here = f"{where}/{tag}"

    if tag in USER_LEAVES or tag == SUBTREE:
        name = attrs.pop("ID", None)
        if not name:
            raise TreeParseError(f"{here}: <{elem.tag}> requires an ID attribute")
        kind = tag
    elif tag in KINDS:
        kind, name = tag, ""
    else:
        # unknown tags are late-bound behaviors; validation reports missing ones
        kind, name = "Action", tag

    if kind in COMPOSITES and not children:
        raise TreeParseError(f"{here}: {kind} needs at least one child")
    if kind in DECORATORS and len(children) != 1:
        raise TreeParseError(f"{here}: decorator {kind} needs exactly one child, has {len(children)}")
    if (kind in USER_LEAVES or kind in BUILTIN_LEAVES or kind == SUBTREE) and children:
        raise TreeParseError(f"{here}: {name or kind} is a leaf and cannot have children")

    node = NodeSpec(kind=kind, name=name, attrs=attrs)
    node.children = [_convert(c, here) for c in children]
    return node


def parse_tree_xml(text: str | bytes, source_path: str = "") -> TreeSpec:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise TreeParseError(f"{source_path or '<xml>'}: malformed XML: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise TreeParseError(f"{source_path or '<xml>'}: unreadable document: {exc}") from exc

    if root.tag != "root":
        raise TreeParseError(f"document root must be <root>, found <{root.tag}>")
    warnings = []
    fmt = root.get("BTCPP_format")
    if fmt is None:
        warnings.append("missing BTCPP_format attribute; assuming 4")
        log.warning("%s: %s", source_path or "<xml>", warnings[-1])
    elif fmt != "4":
        warnings.append(f"BTCPP_format={fmt!r} is not 4; parsing anyway")

    trees: dict[str, NodeSpec] = {}
    try:
        for child in root:
            if child.tag != "BehaviorTree":
                continue  # TreeNodesModel and editor metadata
            tree_id = child.get("ID")
            if not tree_id:
                raise TreeParseError("<BehaviorTree> without ID")
            if tree_id in trees:
                raise TreeParseError(f"duplicate BehaviorTree ID {tree_id!r}")
            body = list(child)
            if len(body) != 1:
                raise TreeParseError(f"BehaviorTree {tree_id!r} must have exactly one root node, has {len(body)}")
            trees[tree_id] = _convert(body[0], tree_id)
    except RecursionError as exc:
        raise TreeParseError("tree nesting too deep") from exc
    if not trees:
        raise TreeParseError("document contains no <BehaviorTree> element")

    main = root.get("main_tree_to_execute")
    if main is None:
        if len(trees) != 1:
            raise TreeParseError("several trees defined; main_tree_to_execute is required")
        main = next(iter(trees))
    elif main not in trees:
        raise TreeParseError(f"main_tree_to_execute {main!r} is not defined")
    return TreeSpec(main_tree_id=main, trees=trees, source_path=source_path, warnings=warnings)


def load_tree(path) -> TreeSpec:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TreeParseError(f"cannot read tree file {path}: {exc}") from exc
    return parse_tree_xml(data, source_path=str(path))


def _to_element(node: NodeSpec) -> ET.Element:
    attrs = {}
    if node.kind in USER_LEAVES:
        usable = _XML_NAME.match(node.name) and node.name not in KINDS and node.name not in TAG_ALIASES
        if node.kind == "Action" and usable:
            tag = node.name
        else:
            tag = node.kind
            attrs["ID"] = node.name
    elif node.kind == SUBTREE:
        tag = SUBTREE
        attrs["ID"] = node.name
    else:
        tag = node.kind
    attrs.update(node.attrs)
    elem = ET.Element(tag, attrs)
    if node.kind != SUBTREE:
        for child in node.children:
            elem.append(_to_element(child))
    return elem


def serialize_tree_xml(spec: TreeSpec) -> str:
    """Render ``spec`` as XML; expanded SubTree bodies are not written out."""
    root = ET.Element("root", {"BTCPP_format": "4", "main_tree_to_execute": spec.main_tree_id})
    for tree_id, node in spec.trees.items():
        bt = ET.SubElement(root, "BehaviorTree", {"ID": tree_id})
        bt.append(_to_element(node))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")
