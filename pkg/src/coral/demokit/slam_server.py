"""Skillset: a transform-and-accumulate stand-in for SLAM.

Map file (MapState JSON): ``{"points": [[x, y, z], ...], "labels": {label: count},
"snapshot_count": n}``.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import threading
from collections import Counter
from pathlib import Path

from coral.component import Component, run_component
from coral.registry import (
    BehaviorDecl,
    BehaviorManifest,
    export_manifest,
    poll_topic,
    ports,
    service,
)

log = logging.getLogger(__name__)


def manifest(skillset: str) -> BehaviorManifest:
    return BehaviorManifest(skillset, (
        BehaviorDecl("LoadMap", service("slam/load_map", response={"count": "count"}),
                     ports=ports(("count", "out", "points in the loaded map"))),
        BehaviorDecl("IntegrateSnapshot",
                     service("slam/integrate", {"snapshot": "snapshot", "labels": "labels"},
                             {"count": "count"}),
                     ports=ports(("snapshot", "in", "{t, points, pose}"),
                                 ("labels", "in", "optional per-point labels"),
                                 ("count", "out", "points in the map afterwards"))),
        BehaviorDecl("SaveMap", service("slam/save_map", response={"path": "path"}),
                     ports=ports(("path", "out", "absolute path of the written map"))),
        BehaviorDecl("CheckStop", poll_topic("ui/stop", "stop"), kind="condition"),
    ))


def transform(points, pose):
    """Rotate by yaw about z, then translate in x and y; z passes through."""
    px, py, _, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    return [[c * x - s * y + px, s * x + c * y + py, z] for x, y, z in points]


class MapState:
    def __init__(self, points=None, labels=None, snapshot_count=0):
        self.points = list(points or [])
        self.labels = Counter(labels or {})
        self.snapshot_count = snapshot_count

    def to_dict(self) -> dict:
        return {"points": self.points, "labels": dict(sorted(self.labels.items())),
                "snapshot_count": self.snapshot_count}

    @classmethod
    def load(cls, path) -> "MapState":
        obj = json.loads(Path(path).read_text())
        return cls(obj.get("points"), obj.get("labels"), int(obj.get("snapshot_count", 0)))


class SlamServer:
    def __init__(self, params: dict):
        self.map_in = params.get("map_in")
        self.map_out = params.get("map_out", "map.json")
        self.state = MapState()
        self.lock = threading.Lock()

    def load_map(self, request):
        with self.lock:
            if self.map_in and Path(self.map_in).exists():
                try:
                    self.state = MapState.load(self.map_in)
                except (OSError, ValueError) as exc:
                    return {"status": "failure", "error": f"bad map {self.map_in}: {exc}"}
            else:
                self.state = MapState()
            return {"status": "success", "count": len(self.state.points)}

    def integrate(self, request):
        snap = request.get("snapshot") if isinstance(request, dict) else None
        if not isinstance(snap, dict) or not snap.get("points") or len(snap.get("pose") or []) != 4:
            return {"status": "failure", "error": "snapshot needs points and a 4-element pose"}
        labels = request.get("labels")
        if labels is not None and len(labels) != len(snap["points"]):
            return {"status": "failure", "error": "labels must match points one to one"}
        with self.lock:
            self.state.points.extend(transform(snap["points"], snap["pose"]))
            if labels:
                self.state.labels.update(labels)
            self.state.snapshot_count += 1
            return {"status": "success", "count": len(self.state.points)}

    def save_map(self, request):
        path = Path(self.map_out).resolve()
        with self.lock:
            body = json.dumps(self.state.to_dict())
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(body)
        except OSError as exc:
            return {"status": "failure", "error": f"cannot write {path}: {exc.strerror}"}
        log.info("saved %d points to %s", len(self.state.points), path)
        return {"status": "success", "path": str(path)}


def setup(c: Component) -> SlamServer:
    server = SlamServer(c.params)
    c.session.serve("slam/load_map", server.load_map)
    c.session.serve("slam/integrate", server.integrate)
    c.session.serve("slam/save_map", server.save_map)
    export_manifest(c.session, manifest(c.name))
    return server


def main() -> int:
    return run_component(setup)


if __name__ == "__main__":
    sys.exit(main())
