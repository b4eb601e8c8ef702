"""Attention cost of SS-Attention relative to full self-attention.

    python scripts/flop_report.py --channels 32 --sizes 24 48 128 256 --csv runs/flops.csv
"""
import argparse
from pathlib import Path

import numpy as np

from ssbsn import tensor as T
from ssbsn.analysis import dynamic_flop_count, flop_ratio_report, reports_csv, reports_table
from ssbsn.layers import SSAttention


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, nargs="+", default=[8, 32])
    ap.add_argument("--sizes", type=int, nargs="+", default=[24, 48, 128, 256])
    ap.add_argument("--dhats", type=int, nargs="+", default=[4, 6])
    ap.add_argument("--csv", type=Path, default=None)
    args = ap.parse_args()

    summary = flop_ratio_report([(s, s, c) for s in args.sizes for c in args.channels], args.dhats)
    print(reports_table(summary))
    print("\ninstrumented layer vs closed form:")
    for r in summary.reports:
        try:
            with T.precision(np.float64):
                counted = dynamic_flop_count(SSAttention(r.channels, r.dhat),
                                             (1, r.channels, r.h, r.w)).total("attention")
            verdict = "exact" if counted == r.ss else f"MISMATCH ({counted})"
        except ValueError as err:
            verdict = f"not countable: {err}"
        print(f"  {r.h}x{r.w} C={r.channels} dhat={r.dhat}: {verdict}")
    if args.csv:
        args.csv.parent.mkdir(parents=True, exist_ok=True)
        args.csv.write_text(reports_csv(summary.reports))
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
