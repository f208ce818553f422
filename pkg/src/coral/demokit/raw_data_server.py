"""Skillset: buffers the ``points`` stream and serves time-ordered snapshots.

``raw/get_snapshot`` with ``since`` returns the earliest buffered snapshot
newer than ``since`` (so a loop that feeds back the last ``t`` sees each one
exactly once); without ``since`` it returns the latest.
"""

from __future__ import annotations

import bisect
import sys
import threading

from coral.component import Component, run_component
from coral.demokit.bag import valid_record
from coral.demokit.stream import POINTS_TOPIC
from coral.registry import BehaviorDecl, BehaviorManifest, export_manifest, ports, service

CHANNEL = "raw/get_snapshot"
MAX_BUFFER = 100_000


def manifest(skillset: str) -> BehaviorManifest:
    return BehaviorManifest(skillset, (
        BehaviorDecl("GetSnapshot", service(CHANNEL, {"since": "since"},
                                            {"snapshot": "snapshot", "t": "t"}),
                     ports=ports(("since", "in", "only return snapshots newer than this"),
                                 ("snapshot", "out", "{t, points, pose}"),
                                 ("t", "out", "timestamp of the snapshot"))),
    ))


class SnapshotBuffer:
    def __init__(self):
        self.times = []
        self.records = []
        self.lock = threading.Lock()

    def add(self, rec) -> None:
        if not valid_record(rec):
            return
        with self.lock:
            if self.times and rec["t"] <= self.times[-1]:
                return
            self.times.append(rec["t"])
            self.records.append(rec)
            if len(self.records) > MAX_BUFFER:
                del self.times[0], self.records[0]

    def handle(self, request) -> dict:
        since = request.get("since") if isinstance(request, dict) else None
        if since is not None:
            try:
                since = float(since)  # tree literals arrive as strings
            except (TypeError, ValueError):
                return {"status": "failure", "error": f"bad since {since!r}"}
        with self.lock:
            if not self.records:
                return {"status": "failure", "error": "no data yet"}
            if since is None:
                rec = self.records[-1]
            else:
                i = bisect.bisect_right(self.times, since)
                if i == len(self.records):
                    return {"status": "failure", "error": f"nothing newer than {since}"}
                rec = self.records[i]
        snap = {"t": rec["t"], "points": rec["points"], "pose": rec["pose"]}
        return {"status": "success", **snap, "snapshot": snap}


def setup(c: Component) -> SnapshotBuffer:
    buf = SnapshotBuffer()
    # the callback runs on the receive thread, so a snapshot is buffered
    # before any later request is served
    c.session.subscribe(POINTS_TOPIC, callback=lambda env: buf.add(env.data))
    c.session.serve(CHANNEL, buf.handle)
    export_manifest(c.session, manifest(c.name))
    return buf


def main() -> int:
    return run_component(setup)


if __name__ == "__main__":
    sys.exit(main())
