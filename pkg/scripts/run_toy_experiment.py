#!/usr/bin/env python3
"""End-to-end desk-scale experiment.

Generates the synthetic 3-class dataset, trains the toy hybrid, evaluates
the held-out split, and dumps CLS features — all through the CLI, so this
doubles as a smoke test of the command surface.

Usage: python3 scripts/run_toy_experiment.py [workdir] [--seed N] [--epochs N]
"""

import argparse
import sys
from pathlib import Path

from effvit.cli import main as cli


def run(argv):
    print("+ effvit " + " ".join(argv))
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("workdir", nargs="?", default="toy-experiment")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-per-class", type=int, default=300)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    runs = work / "runs"

    run(["synth", "--n", str(args.n_per_class), "--seed", "7", "--out", str(data)])
    run([
        "train", "--data", str(data / "manifest.csv"), "--out", str(runs),
        "--model", "hybrid", "--seed", str(args.seed),
        "--train.epochs", str(args.epochs), "--train.dtype", "float32",
    ])
    run_dir = sorted(runs.iterdir())[-1]
    run([
        "evaluate", "--checkpoint", str(run_dir / "best.evlc"),
        "--data", str(data / "manifest.csv"), "--out", str(work / "eval"),
    ])
    run([
        "export-features", "--checkpoint", str(run_dir / "best.evlc"),
        "--data", str(data / "manifest.csv"), "--layer", "cls",
        "--out", str(work / "cls_features.csv"),
    ])
    print(f"\nartifacts in {work}/: run dir {run_dir.name}, eval/, cls_features.csv")


if __name__ == "__main__":
    main()
