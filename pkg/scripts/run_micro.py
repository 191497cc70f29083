"""Sweep the micro-benchmarks over both engines and write one CSV.

    python3 scripts/run_micro.py --pairs 1000000 --out micro.csv
"""

import argparse
import contextlib
import csv
import io
import os
import tempfile

from sharkle.bench import CSV_HEADER, MICRO_OPS, main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--pairs", type=int, default=None, help="default: each operator's own size")
    p.add_argument("--ops", nargs="+", choices=MICRO_OPS, default=list(MICRO_OPS))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default="micro.csv")
    return p.parse_args()


def main_():
    args = parse_args()
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for op in args.ops:
            path = os.path.join(tmp, f"{op}.csv")
            argv = ["micro", op, "--engines", "both", "--workers", str(args.workers), "--repeats", str(args.repeats), "--csv", path]
            if args.pairs:
                argv += ["--pairs", str(args.pairs)]
            with contextlib.redirect_stdout(io.StringIO()):
                main(argv)
            with open(path) as f:
                got = list(csv.DictReader(f))
            rows += got
            by = {r["engine"]: float(r["elapsed_ms"]) for r in got}
            print(f"{op}: baseline/shared {by['baseline'] / by['shared_memory']:.2f}")
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, CSV_HEADER)
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main_()
