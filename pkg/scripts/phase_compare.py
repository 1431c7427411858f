"""Paired comparison of the ledger path and the lightchain-only path.

Both paths get the same input files and a fresh local store per trial.
Prints per-path medians and the relative reduction of the lightchain path.

    python3 scripts/phase_compare.py --sizes 1 2 4 --trials 20
"""

import argparse
import statistics
import tempfile
from pathlib import Path

from cidchain.metrics import MIB
from cidchain.pipeline import compare_phases, write_dummy_file


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=float, nargs="+", default=[1, 2, 4], help="MiB")
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--work", type=Path, help="keep trial stores here (default: temp dir)")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        work = args.work or Path(tmp)
        files = [write_dummy_file(work / "in" / f"f{i}.bin", int(s * MIB), "random", seed=i)
                 for i, s in enumerate(args.sizes)]
        cmp = compare_phases(files, work / "trials", trials=args.trials)

    p1, p2 = cmp.phase1_median, cmp.phase2_median
    print(f"ledger path      median {p1 * 1000:8.2f} ms  (stdev {statistics.pstdev(cmp.phase1_s) * 1000:.2f})")
    print(f"lightchain path  median {p2 * 1000:8.2f} ms  (stdev {statistics.pstdev(cmp.phase2_s) * 1000:.2f})")
    print(f"reduction {100 * (p1 - p2) / p1:.1f}%  ordering holds: {p2 <= p1}")
    wins = sum(b <= a for a, b in zip(cmp.phase1_s, cmp.phase2_s))
    print(f"lightchain faster in {wins}/{len(cmp.phase1_s)} paired trials")


if __name__ == "__main__":
    main()
