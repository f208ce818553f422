"""Shared publishing loop for the point-cloud drivers."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from coral.bus import BusError

log = logging.getLogger(__name__)

POINTS_TOPIC = "points"
STOP_TOPIC = "ui/stop"


def stream(component, records, rate_hz: float = 20.0, stop_on_end: bool = False,
           stop_period: float = 0.5, record_path=None) -> int:
    """Publish records at ``rate_hz``, then idle until stopped.

    With ``stop_on_end`` the driver plays the operator: after the last record
    it keeps announcing ``ui/stop`` so late subscribers see it too.
    """
    session = component.session
    period = 1.0 / rate_hz
    sent = 0
    record = None
    if record_path:
        Path(record_path).parent.mkdir(parents=True, exist_ok=True)
        record = open(record_path, "w")
    try:
        next_at = time.monotonic()
        for rec in records:
            if component.stop.is_set():
                return sent
            session.publish(POINTS_TOPIC, rec)
            sent += 1
            if record is not None:
                record.write(json.dumps(rec) + "\n")
                record.flush()
            next_at += period
            component.stop.wait(max(0.0, next_at - time.monotonic()))
    except BusError as exc:
        log.error("publishing stopped: %s", exc)
        return sent
    finally:
        if record is not None:
            record.close()
    log.info("%s: published %d records", component.name, sent)
    if not stop_on_end:
        component.wait()
        return sent
    while True:
        try:
            session.publish(STOP_TOPIC, {"stop": True, "source": component.name})
        except BusError:
            break
        if component.stop.wait(stop_period):
            break
    return sent
