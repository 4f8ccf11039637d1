"""Sensitivity of DAML to eta and lambda_m (one sweep each, the other at its default).

    python scripts/sensitivity.py --out runs/sensitivity
"""
import argparse
from pathlib import Path

from _common import ensure_corpus, write_config
from daml.cli import main

GRIDS = {"eta": "0.001,0.005,0.01,0.05,0.1", "lambda_m": "0.1,0.5,1.0,2.0,5.0"}


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sensitivity")
    ap.add_argument("--params", default="eta,lambda_m")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    root = Path(args.out)
    data = ensure_corpus(root)
    cfg = write_config(root / "train.cfg", variant="daml", max_epochs=args.epochs)
    rc = 0
    for param in args.params.split(","):
        rc |= main(["sweep", "--config", str(cfg), "--data", str(data), "--out", str(root / param),
                    "--param", param, "--values", GRIDS[param], "--seeds", args.seeds,
                    "--jobs", str(args.jobs)])
    return rc


if __name__ == "__main__":
    raise SystemExit(run())
