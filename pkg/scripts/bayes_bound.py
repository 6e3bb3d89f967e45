"""EER of the optimal scorer on the synthetic task: per-split and on unlimited data.

    python3 scripts/bayes_bound.py [--sigma 0.5] [--seeds 42 43 44]
"""

import argparse

from thama.data import SynthConfig, generate_synthetic
from thama.experiments import bayes_eer, population_bayes_eer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--seeds", type=int, nargs="+", default=[42])
    ap.add_argument("--population-n", type=int, default=400_000)
    args = ap.parse_args()
    for seed in args.seeds:
        syn = generate_synthetic(SynthConfig(sigma=args.sigma, seed=seed))
        cells = "  ".join(f"{dom}/{split} {bayes_eer(syn, dom, split):5.2f}%" for dom in ("E", "C") for split in ("dev", "test"))
        print(f"seed {seed}: {cells}")
    print(f"population (n={args.population_n:,}): {population_bayes_eer(args.sigma, n=args.population_n):.2f}%")


if __name__ == "__main__":
    main()
