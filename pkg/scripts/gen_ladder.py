"""Generate the 5..530 MB dummy-file ladder and report how long it took.

    python3 scripts/gen_ladder.py --out generated_files [--fill random]
"""

import argparse
import logging
import time
from pathlib import Path

from cidchain.pipeline import GeneratorConfig, gen_files
from cidchain.watcher import format_file_size


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--start", type=int, default=5)
    ap.add_argument("--gap", type=int, default=5)
    ap.add_argument("--max", type=int, default=550)
    ap.add_argument("--out", type=Path, default=Path("generated_files"))
    ap.add_argument("--fill", choices=("zeros", "random"), default="zeros")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    t0 = time.perf_counter()
    files = gen_files(GeneratorConfig(args.start, args.gap, args.max, args.out, args.fill))
    elapsed = time.perf_counter() - t0
    total = sum(p.stat().st_size for p, _ in files)
    print(f"{len(files)} files, {format_file_size(total)} apparent size, {elapsed:.2f} s")
    print("sizes (MB):", ", ".join(str(s) for _, s in files))


if __name__ == "__main__":
    main()
