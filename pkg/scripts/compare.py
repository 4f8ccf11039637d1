"""Naive / DANN / DAML (optionally sML, FA, NE) on the synthetic shift, 3 seeds.

    python scripts/compare.py --out runs/compare --variants naive,dann,daml --epochs 15
"""
import argparse
from pathlib import Path

from _common import ensure_corpus, write_config
from daml.cli import main


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--variants", default="naive,dann,daml")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    root = Path(args.out)
    data = ensure_corpus(root)
    cfg = write_config(root / "train.cfg", max_epochs=args.epochs)
    return main(["compare", "--config", str(cfg), "--data", str(data), "--out", str(root / "results"),
                 "--variants", args.variants, "--seeds", args.seeds, "--jobs", str(args.jobs)])


if __name__ == "__main__":
    raise SystemExit(run())
