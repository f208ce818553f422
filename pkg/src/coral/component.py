"""Process-side helpers for skillsets and drivers started by the supervisor.

The supervisor hands each child its identity and parameters through the
environment: CORAL_BUS_ADDR, CORAL_COMPONENT_NAME, CORAL_PARAMS (JSON).
"""

from __future__ import annotations

import json
import logging
import os
import signal
import threading

from coral.bus import BusClient, connect

log = logging.getLogger(__name__)

CONNECT_RETRY = 10.0


def setup_logging(name: str) -> None:
    logging.basicConfig(level=os.environ.get("CORAL_LOG_LEVEL", "INFO"),
                        format=f"%(asctime)s {name} %(levelname)s %(message)s")


def env_params() -> dict:
    raw = os.environ.get("CORAL_PARAMS", "")
    if not raw:
        return {}
    params = json.loads(raw)
    if not isinstance(params, dict):
        raise ValueError("CORAL_PARAMS must be a JSON object")
    return params


class Component:
    def __init__(self, name: str | None = None, params: dict | None = None, addr: str | None = None):
        self.name = name or os.environ.get("CORAL_COMPONENT_NAME") or "component"
        self.params = env_params() if params is None else params
        self.addr = addr
        self.stop = threading.Event()
        self.session: BusClient | None = None

    def param(self, key: str, default=None):
        return self.params.get(key, default)

    def connect(self) -> BusClient:
        self.session = connect(self.addr, self.name, retry_for=CONNECT_RETRY)
        return self.session

    def install_signal_handlers(self) -> None:
        def handler(signum, frame):
            log.info("%s: signal %d, stopping", self.name, signum)
            self.stop.set()
        signal.signal(signal.SIGTERM, handler)
        signal.signal(signal.SIGINT, handler)

    def wait(self) -> None:
        """Block until stopped or the bus connection drops."""
        while not self.stop.wait(0.2):
            if self.session is not None and not self.session.connected:
                log.warning("%s: bus connection lost", self.name)
                break

    def close(self) -> None:
        if self.session is not None:
            self.session.close()


def run_component(setup, name: str | None = None) -> int:
    """Process entry point: connect, call ``setup(component)``, serve until stopped."""
    c = Component(name)
    setup_logging(c.name)
    c.install_signal_handlers()
    try:
        c.connect()
        setup(c)
    except Exception as exc:
        log.error("%s failed to start: %s", c.name, exc)
        c.close()
        return 1
    c.wait()
    c.close()
    return 0 if c.stop.is_set() else 1
