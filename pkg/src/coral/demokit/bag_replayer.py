"""Driver: replays a bag file onto ``points``."""

from __future__ import annotations

import logging
import sys

from coral.component import Component, setup_logging
from coral.demokit.bag import read_bag
from coral.demokit.stream import stream

log = logging.getLogger(__name__)


def run(component: Component) -> int:
    bag = component.param("bag")
    if not bag:
        log.error("bag_replayer needs a 'bag' parameter")
        return 2
    try:
        records = list(read_bag(bag))
    except OSError as exc:
        log.error("cannot read bag %s: %s", bag, exc)
        return 2
    log.info("replaying %d records from %s", len(records), bag)
    stream(component, records, float(component.param("rate_hz", 20)),
           bool(component.param("stop_on_end", False)))
    return 0


def main() -> int:
    c = Component()
    setup_logging(c.name)
    c.install_signal_handlers()
    c.connect()
    try:
        return run(c)
    finally:
        c.close()


if __name__ == "__main__":
    sys.exit(main())
