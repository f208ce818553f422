"""Write the Demo A bag: python make_bag.py [--lines 50] [--seed 0]"""

import argparse
from pathlib import Path

from coral.demokit.bag import generate_bag

here = Path(__file__).resolve().parent
ap = argparse.ArgumentParser()
ap.add_argument("--lines", type=int, default=50)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default=str(here / "demo_a" / "data" / "demo_a_bag.jsonl"))
args = ap.parse_args()
generate_bag(args.out, args.lines, args.seed)
print(f"{args.lines} lines -> {args.out}")
