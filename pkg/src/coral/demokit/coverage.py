"""Skillset: mock coverage planning over a labelled map, plus a safe idle fallback.

Coverage report: ``{"clusters_visited": [...], "source_map": path}``; every
labelled cluster is visited once, in sorted order.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

from coral.component import Component, run_component
from coral.registry import BehaviorDecl, BehaviorManifest, export_manifest, ports, service

log = logging.getLogger(__name__)


def manifest(skillset: str) -> BehaviorManifest:
    return BehaviorManifest(skillset, (
        BehaviorDecl("MockCoverage", service("coverage/plan", {"map_path": "map_path"},
                                             {"report_path": "report_path"}),
                     ports=ports(("map_path", "in", "map file to cover"),
                                 ("report_path", "out", "where the report went"))),
        BehaviorDecl("SafeIdle", service("coverage/safe_idle"), ports=()),
    ))


def _write(path, obj) -> str:
    path = Path(path).resolve()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj))
    return str(path)


class Coverage:
    def __init__(self, params: dict):
        self.report_path = params.get("report_path", "coverage_report.json")
        self.idle_path = params.get("idle_path", "safe_idle.json")

    def plan(self, request):
        map_path = request.get("map_path") if isinstance(request, dict) else None
        if not map_path:
            return {"status": "failure", "error": "no map_path"}
        try:
            state = json.loads(Path(map_path).read_text())
        except (OSError, ValueError) as exc:
            return {"status": "failure", "error": f"cannot read map {map_path}: {exc}"}
        report = {"clusters_visited": sorted(state.get("labels") or {}), "source_map": map_path}
        try:
            out = _write(self.report_path, report)
        except OSError as exc:
            return {"status": "failure", "error": str(exc)}
        log.info("coverage of %s: %d clusters", map_path, len(report["clusters_visited"]))
        return {"status": "success", "report_path": out}

    def safe_idle(self, request):
        try:
            _write(self.idle_path, {"safe_idle": True, "t": time.time()})
        except OSError as exc:
            return {"status": "failure", "error": str(exc)}
        log.info("no coordination; idling safely")
        return {"status": "success"}


def setup(c: Component) -> Coverage:
    cov = Coverage(c.params)
    c.session.serve("coverage/plan", cov.plan)
    c.session.serve("coverage/safe_idle", cov.safe_idle)
    export_manifest(c.session, manifest(c.name))
    return cov


def main() -> int:
    return run_component(setup)


if __name__ == "__main__":
    sys.exit(main())
