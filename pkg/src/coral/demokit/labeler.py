"""Skillset: deterministic per-point labels, a stand-in for semantic segmentation."""

from __future__ import annotations

import sys
import zlib

from coral.component import Component, run_component
from coral.registry import BehaviorDecl, BehaviorManifest, export_manifest, ports, service


def manifest(skillset: str) -> BehaviorManifest:
    return BehaviorManifest(skillset, (
        BehaviorDecl("LabelSnapshot", service("label/snapshot", {"snapshot": "snapshot"},
                                              {"labels": "labels"}),
                     ports=ports(("snapshot", "in", "{t, points, pose}"),
                                 ("labels", "out", "one label per point"))),
    ))


def label(point, classes: int = 4) -> str:
    key = ",".join(f"{v:.1f}" for v in point).encode()
    return f"cluster_{zlib.crc32(key) % classes}"


def handler(classes: int):
    def handle(request):
        snap = request.get("snapshot") if isinstance(request, dict) else None
        if not isinstance(snap, dict) or not snap.get("points"):
            return {"status": "failure", "error": "no snapshot"}
        return {"status": "success", "labels": [label(p, classes) for p in snap["points"]]}
    return handle


def setup(c: Component) -> None:
    c.session.serve("label/snapshot", handler(int(c.param("classes", 4))))
    export_manifest(c.session, manifest(c.name))


def main() -> int:
    return run_component(setup)


if __name__ == "__main__":
    sys.exit(main())
