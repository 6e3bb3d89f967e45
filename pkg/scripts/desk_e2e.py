"""Train THAMA and the concat baseline on the default synthetic task; print test EERs.

    python3 scripts/desk_e2e.py [--sigma 0.5] [--epochs 100] [--json out.json]
"""

import argparse
import json
import logging
import time

from thama.data import SynthConfig, generate_synthetic
from thama.experiments import bayes_eer, desk_run
from thama.training import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sigma", type=float, default=0.5)
    ap.add_argument("--theta", type=float, default=30.0)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--kinds", nargs="+", default=["thama", "concat"])
    ap.add_argument("--json")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    syn = generate_synthetic(SynthConfig(sigma=args.sigma, theta_deg=args.theta, seed=args.seed))
    rows = {"bayes_test_eer": bayes_eer(syn)}
    print(f"optimal scorer, E test split: EER {rows['bayes_test_eer']:.2f}%")
    start = time.perf_counter()
    for kind in args.kinds:
        run = desk_run(kind, syn, TrainConfig(max_epochs=args.epochs))
        rows[kind] = {"eer": run.report.eer, "epochs": len(run.history), "seconds": run.seconds}
        print(f"{kind:7s} in-domain test EER {run.report.eer:6.2f}%  ({len(run.history)} epochs, {run.seconds:.0f}s)")
    rows["total_seconds"] = time.perf_counter() - start
    print(f"total {rows['total_seconds']:.0f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
