"""Manifest export (skillset side) and fetch (executor side)."""

from __future__ import annotations

import logging
import time

from coral.bus import BusClient, BusError, CallTimeout, ServiceError
from coral.errors import ReadinessError
from coral.registry.manifest import BehaviorManifest, ManifestError, manifest_from_dict, validate_manifest

log = logging.getLogger(__name__)

MANIFEST_TOPIC = "coral/manifest"
DEFAULT_DEADLINE = 30.0
INITIAL_BACKOFF = 0.1
MAX_BACKOFF = 2.0


def manifest_channel(skillset: str) -> str:
    return f"coral/manifest/get/{skillset}"


def export_manifest(session: BusClient, m: BehaviorManifest):
    """Serve the manifest for late joiners and announce it once for early ones.

    A second exporter of the same skillset name gets ServiceError('service_taken').
    """
    payload = validate_manifest(m).to_dict()
    reg = session.serve(manifest_channel(m.skillset), lambda request: payload)
    session.publish(MANIFEST_TOPIC, payload)
    return reg


def fetch_manifests(session: BusClient, expected, deadline: float = DEFAULT_DEADLINE,
                    sleep=time.sleep, clock=time.monotonic) -> dict[str, BehaviorManifest]:
    """Poll every expected skillset until all answer or ``deadline`` seconds pass."""
    expected = sorted(set(expected))
    found: dict[str, BehaviorManifest] = {}
    end = clock() + deadline
    backoff = INITIAL_BACKOFF
    while True:
        for name in expected:
            if name in found:
                continue
            remaining = end - clock()
            if remaining <= 0:
                break
            try:
                reply = session.call(manifest_channel(name), {}, timeout=min(1.0, remaining))
            except (ServiceError, CallTimeout) as exc:
                log.debug("manifest %s not available yet: %s", name, exc)
                continue
            except BusError as exc:
                raise ReadinessError(f"bus failure while fetching manifests: {exc}",
                                     [n for n in expected if n not in found]) from exc
            m = manifest_from_dict(reply)
            if m.skillset != name:
                raise ManifestError("skillset", f"expected {name!r}, got {m.skillset!r}")
            found[name] = m
            log.info("manifest %s: %s", name, ", ".join(sorted(m.names())) or "(no behaviors)")
        missing = [n for n in expected if n not in found]
        if not missing:
            return found
        remaining = end - clock()
        if remaining <= 0:
            raise ReadinessError(f"skillsets not ready within {deadline:g}s: {', '.join(missing)}",
                                 missing)
        sleep(min(backoff, remaining))
        backoff = min(backoff * 2, MAX_BACKOFF)
