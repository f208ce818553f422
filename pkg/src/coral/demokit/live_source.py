"""Driver: synthetic live sensor with the same ``points`` contract as the replayer.

With ``record_path`` set, every published record is also written there,
one JSON object per line, so a run can be checked against what was sent.
"""

from __future__ import annotations

import random
import sys

from coral.component import Component, setup_logging
from coral.demokit.bag import make_record
from coral.demokit.stream import stream


def records(seed: int, lines: int):
    rng = random.Random(seed)
    for i in range(lines):
        yield make_record(rng, i)


def run(component: Component) -> int:
    p = component.param
    stream(component, records(int(p("seed", 0)), int(p("lines", 50))), float(p("rate_hz", 20)),
           bool(p("stop_on_end", False)), record_path=p("record_path"))
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
