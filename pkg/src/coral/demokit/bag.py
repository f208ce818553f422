"""JSON-lines point-cloud bags: one ``{"t", "points", "pose"}`` object per line."""

from __future__ import annotations

import argparse
import json
import logging
import math
import random
from pathlib import Path

log = logging.getLogger(__name__)


def make_record(rng: random.Random, i: int, min_points: int = 3, max_points: int = 12,
                dt: float = 0.1) -> dict:
    n = rng.randint(min_points, max_points)
    points = [[round(rng.uniform(-5, 5), 3), round(rng.uniform(-5, 5), 3), round(rng.uniform(0, 2), 3)]
              for _ in range(n)]
    pose = [round(0.2 * i, 3), round(0.1 * i, 3), 0.0, round((i * 0.05) % (2 * math.pi), 4)]
    return {"t": round(i * dt, 6), "points": points, "pose": pose}


def generate_bag(path, lines: int = 50, seed: int = 0, **kw) -> Path:
    rng = random.Random(seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i in range(lines):
            fh.write(json.dumps(make_record(rng, i, **kw)) + "\n")
    return path


def valid_record(rec) -> bool:
    if not isinstance(rec, dict):
        return False
    points, pose, t = rec.get("points"), rec.get("pose"), rec.get("t")
    return (isinstance(t, (int, float)) and not isinstance(t, bool)
            and isinstance(points, list) and len(points) > 0
            and all(isinstance(p, list) and len(p) == 3 for p in points)
            and isinstance(pose, list) and len(pose) == 4)


def read_bag(path):
    """Yield valid records; malformed lines are skipped with a warning."""
    last_t = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError:
                log.warning("%s:%d: not JSON, skipped", path, lineno)
                continue
            if not valid_record(rec):
                log.warning("%s:%d: not a bag record, skipped", path, lineno)
                continue
            if last_t is not None and rec["t"] <= last_t:
                log.warning("%s:%d: timestamp does not increase, skipped", path, lineno)
                continue
            last_t = rec["t"]
            yield rec


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="write a synthetic point-cloud bag")
    ap.add_argument("path")
    ap.add_argument("--lines", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    generate_bag(args.path, args.lines, args.seed)
    print(f"wrote {args.lines} lines to {args.path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
