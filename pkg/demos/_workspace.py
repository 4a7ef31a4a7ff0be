"""Shared setup for the demos: build (or reuse) the default synthetic
dataset and desk-scale pre-trained artifacts under one directory."""
from pathlib import Path

from promuse import cli

DEFAULT_ROOT = Path("demo_workspace")


def prepare(root=DEFAULT_ROOT):
    root = Path(root)
    data, pre = root / "data", root / "pre"
    if not (data / "dataset.json").exists():
        assert cli.main(["synth", "--out", str(data)]) == 0
    if not (pre / "data_encoder.ckpt").exists():
        assert cli.main(["pretrain", "--data", str(data), "--out", str(pre)]) == 0
    return data, pre
