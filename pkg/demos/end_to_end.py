"""Whole pipeline through the command line: synthetic data, pre-training,
one ProMUSE run, missing-modality evaluation and the statistical baselines.

    python demos/end_to_end.py [--root DIR] [--epochs N]

Takes about two minutes at the default desk sizes.
"""
import argparse
import json
from pathlib import Path

from _workspace import DEFAULT_ROOT, prepare

from promuse import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--root", default=str(DEFAULT_ROOT))
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    root = Path(args.root)
    data, pre = prepare(root)

    run = root / "promuse"
    cli.main(["train", "--data", str(data), "--pretrained", str(pre), "--out", str(run),
              "--epochs", str(args.epochs), "--seeds", "0", "--lr", "1e-4"])
    ckpt = run / "seed0" / "model.ckpt"
    for flag in ([], ["--news-only"], ["--data-only"]):
        cli.main(["eval", "--model", str(ckpt), "--data", str(data)] + flag)
    cli.main(["baseline", "--data", str(data)])

    curve = json.loads((run / "seed0" / "metrics.json").read_text())["epoch_curves"]
    print("\nepoch  loss    dev acc")
    for c in curve:
        loss = "   -  " if c["train_loss"] is None else f"{c['train_loss']:.3f}"
        print(f"{c['epoch']:5d}  {loss}  {c['dev_acc']:.2f}")


if __name__ == "__main__":
    main()
