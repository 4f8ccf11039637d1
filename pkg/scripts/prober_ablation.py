"""DAML with the label prober fitted on target, source or both domains.

    python scripts/prober_ablation.py --out runs/prober --seeds 0,1,2
"""
import argparse
from pathlib import Path

from _common import ensure_corpus, write_config
from daml.cli import main


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/prober")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    root = Path(args.out)
    data = ensure_corpus(root)
    cfg = write_config(root / "train.cfg", max_epochs=args.epochs)
    return main(["ablate-prober", "--config", str(cfg), "--data", str(data), "--out", str(root / "results"),
                 "--seeds", args.seeds, "--jobs", str(args.jobs)])


if __name__ == "__main__":
    raise SystemExit(run())
