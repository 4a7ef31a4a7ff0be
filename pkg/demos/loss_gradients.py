"""Gradient norm each loss sends into each parameter group, at the start
of training and after a few epochs.

Shows why the alignment term dominates the shared towers at a small
learning rate: the classification heads start at zero, so early on the
only sizeable signal reaching the prompts and the Data Encoder trunk is
the contrastive one.

    python demos/loss_gradients.py [--epochs 0,5] [--lr 1e-5]
"""
import argparse
from pathlib import Path

import numpy as np
from _workspace import DEFAULT_ROOT, prepare

from promuse import tensor as T
from promuse.dataset import news_batch
from promuse.pipeline import artifacts
from promuse.training import RunConfig, build_model, parameter_groups, train_run

COMPONENTS = ("news", "data", "fusion", "align")


def norms(model, split, n=256):
    idx = np.arange(min(n, len(split)))
    ids, mask = news_batch(split, idx)
    groups = {g: ns for g, ns in parameter_groups(model).items() if ns}
    table = {}
    for comp in COMPONENTS:
        model.params.zero_grad()
        out = model.forward(ids, mask, split.grids[idx], split.v_bar[idx])
        loss = model.losses(out, split.labels[idx])[comp]
        T.backward(T.scale(loss, getattr(model.cfg.weights, comp)))
        table[comp] = {g: float(np.sqrt(sum((model.params[k].grad ** 2).sum() for k in ns)))
                       for g, ns in groups.items()}
    model.params.zero_grad()
    return table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default=str(DEFAULT_ROOT))
    ap.add_argument("--epochs", default="0,5")
    ap.add_argument("--lr", type=float, default=1e-5)
    args = ap.parse_args()
    pre, bundle = artifacts(*prepare(Path(args.root)))
    for ep in (int(e) for e in args.epochs.split(",")):
        cfg = RunConfig(epochs=ep, seeds=(0,), learning_rate=args.lr)
        model = train_run(cfg, bundle, pre, 0).model if ep else build_model(cfg, pre, 0)
        table = norms(model, bundle.splits["train"])
        groups = list(next(iter(table.values())))
        print(f"\nafter {ep} epochs (lr {args.lr:g}); weighted gradient norms")
        print("loss     " + "".join(f"{g:>14s}" for g in groups))
        for comp, row in table.items():
            print(f"{comp:8s} " + "".join(f"{row[g]:14.2e}" for g in groups))


if __name__ == "__main__":
    main()
