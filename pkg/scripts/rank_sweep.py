#!/usr/bin/env python3
"""Adapter-rank sweep: trainable-parameter budget vs desk-scale accuracy.

Trains the toy hybrid at several adapter ranks on the synthetic dataset and
prints a small table of trainable counts and best validation accuracy.

Usage: python3 scripts/rank_sweep.py [--ranks 1 2 4 8] [--epochs 15]
"""

import argparse

from effvit.configs import TrainConfig, toy_model_config
from effvit.data import make_holdout_split, synth_generate
from effvit.hybrid import build_model
from effvit.lora import count_trainable
from effvit.training import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    dataset = synth_generate(300, seed=7, size=32)
    subjects = sorted({(s.subject_id, s.label) for s in dataset})
    plan = make_holdout_split(subjects, ratio=0.8, seed=7)
    split = (plan.assignments["train"], plan.assignments["val"])

    print(f"{'rank':>4}  {'trainable':>9}  {'best val acc':>12}")
    for rank in args.ranks:
        cfg = toy_model_config("hybrid", rank=rank)
        model = build_model(cfg, seed=args.seed)
        tc = TrainConfig(epochs=args.epochs, batch_size=32, lr=1e-3,
                         seed=args.seed, dtype="float32")
        history = train(model, dataset, split, tc)
        best = max(h["val_acc"] for h in history)
        print(f"{rank:>4}  {count_trainable(cfg)['total']:>9}  {best:>12.4f}")


if __name__ == "__main__":
    main()
