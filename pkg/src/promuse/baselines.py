"""Statistical baselines scored on a labelled split: a seeded fair coin and
the 20-day EMA rule."""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from .dataset import Split
from .inference import accuracy
from .market import ema_baseline, random_baseline

BASELINES = ("random", "ema")


def random_accuracy(split: Split, seeds: Sequence[int]) -> Dict[str, object]:
    accs = [accuracy(random_baseline(len(split), s), split.labels) for s in seeds]
    return {"name": "random", "seeds": list(seeds), "accs": accs, "mean": float(np.mean(accs)),
            "std": float(np.std(accs))}


def ema_accuracy(split: Split) -> Dict[str, object]:
    pred = np.array([ema_baseline(s.window) for s in split.samples], dtype=np.int64)
    acc = accuracy(pred, split.labels)
    return {"name": "ema", "accs": [acc], "mean": acc, "std": 0.0}


def run_baselines(split: Split, which: str = "all", seeds: Sequence[int] = (0, 1, 2, 3)) -> Dict[str, dict]:
    if which not in BASELINES + ("all",):
        raise ValueError(f"baseline must be one of {BASELINES + ('all',)}")
    out = {}
    if which in ("random", "all"):
        out["random"] = random_accuracy(split, seeds)
    if which in ("ema", "all"):
        out["ema"] = ema_accuracy(split)
    return out
