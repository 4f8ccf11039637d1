"""DAML and the naive ensemble with 2, 3 and 4 groups.

    python scripts/more_groups.py --out runs/groups --groups 2,3,4
"""
import argparse
from pathlib import Path

from _common import ensure_corpus, write_config
from daml.cli import main


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/groups")
    ap.add_argument("--groups", default="2,3,4")
    ap.add_argument("--variants", default="daml,ne")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    root = Path(args.out)
    data = ensure_corpus(root)
    rc = 0
    for n in (int(x) for x in args.groups.split(",")):
        cfg = write_config(root / f"g{n}.cfg", num_groups=n, max_epochs=args.epochs)
        rc |= main(["compare", "--config", str(cfg), "--data", str(data), "--out", str(root / f"groups{n}"),
                    "--variants", args.variants, "--seeds", args.seeds, "--jobs", str(args.jobs)])
    return rc


if __name__ == "__main__":
    raise SystemExit(run())
