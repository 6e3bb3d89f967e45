"""Trainable-parameter counts for the upstream embedding sizes.

    python3 scripts/param_budget.py [--d-f 96]
"""

import argparse
import itertools

from thama.data import FM_DIMS
from thama.models import ModelSpec, analytic_param_count


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--d-f", type=int, default=96)
    args = ap.parse_args()
    dims = sorted(set(FM_DIMS.values()))
    print(f"{'d1':>5} {'d2':>5} {'thama':>12} {'concat':>12}")
    for d1, d2 in itertools.combinations_with_replacement(dims, 2):
        t = analytic_param_count(ModelSpec("thama", d1, d2, d_f=args.d_f))
        c = analytic_param_count(ModelSpec("concat", d1, d2))
        print(f"{d1:5d} {d2:5d} {t:12,d} {c:12,d}")
    print()
    for d in dims:
        print(f"single view d={d}: fcn {analytic_param_count(ModelSpec('fcn', d)):,}  cnn {analytic_param_count(ModelSpec('cnn', d)):,}")


if __name__ == "__main__":
    main()
