"""Cross-domain matrix: in- and out-domain test EER as the domain shift angle grows.

    python3 scripts/xdomain_matrix.py --thetas 0 30 60 90 --kinds thama concat --out runs/matrix
"""

import argparse
import json
from pathlib import Path

from thama.data import SynthConfig, generate_synthetic
from thama.models import ModelSpec
from thama.training import TrainConfig, cross_domain_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--thetas", type=float, nargs="+", default=[0.0, 30.0, 60.0, 90.0])
    ap.add_argument("--kinds", nargs="+", default=["thama", "concat"])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--n-train", type=int, default=2730)
    ap.add_argument("--out", default="runs/matrix")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for theta in args.thetas:
        syn = generate_synthetic(SynthConfig(theta_deg=theta, n_train=args.n_train))
        for kind in args.kinds:
            spec = ModelSpec(kind, 64, 64)
            for a, b in (("E", "C"), ("C", "E")):
                ind, outd, _ = cross_domain_run(spec, syn[a], syn[b], TrainConfig(max_epochs=args.epochs), names=(a, b))
                for rep in (ind, outd):
                    rows.append({"theta": theta, "kind": kind, **rep.to_dict()})
                print(f"theta {theta:4.0f} {kind:7s} {ind.setting} {ind.eer:6.2f}%  {outd.setting} {outd.eer:6.2f}%", flush=True)
    (out / "matrix.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
