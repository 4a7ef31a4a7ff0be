"""Named run configurations and the grids that group them: loss/head
masks, fusion variants, tuning paradigms, ensemble algorithms, and the
data-size sweep. Each grid row is audited (gradient flow against its loss
mask) and, unless it is a dry run, trained over all seeds.

Mask strings read left to right: losses (news, data, fusion, align) and
prediction heads (news, data, fusion).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .dataset import DataBundle
from .training import (Pretrained, RunConfig, build_model, expected_gradient_groups, gradient_flow,
                       train)

log = logging.getLogger(__name__)

FRACTIONS = (1.0, 0.5, 0.25, 0.1)
SWEEP_EPOCHS = 80


def _masked(base: RunConfig, name: str, losses: str, heads: str, **kw) -> RunConfig:
    return dataclasses.replace(base, name=name, losses=tuple(c == "1" for c in losses),
                               heads=tuple(c == "1" for c in heads), **kw)


def _uni(base: RunConfig, name: str, kind: str, **kw) -> RunConfig:
    losses, heads = ("1000", "100") if kind == "news" else ("0100", "010")
    return _masked(base, name, losses, heads, modalities=kind, **kw)


SCRATCH = {"news_init": "scratch", "paradigm": "fine-tune", "data_init": "scratch"}

# name -> builder(base); every builder keeps the base's optimiser settings
PRESETS: Dict[str, Callable[[RunConfig], RunConfig]] = {
    "promuse": lambda b: _masked(b, "promuse", "1111", "111"),
    # news tower alone
    "news-only": lambda b: _uni(b, "news-only", "news"),
    "news-fine-tune": lambda b: _uni(b, "news-fine-tune", "news", paradigm="fine-tune"),
    "news-soft-prompt": lambda b: _uni(b, "news-soft-prompt", "news", paradigm="soft-prompt"),
    "news-hard-prompt": lambda b: _uni(b, "news-hard-prompt", "news", paradigm="hard-prompt"),
    "news-zero-shot": lambda b: _uni(b, "news-zero-shot", "news", paradigm="zero-shot"),
    "news-scratch": lambda b: _uni(b, "news-scratch", "news", news_init="scratch", paradigm="fine-tune"),
    # data tower alone
    "data-only": lambda b: _uni(b, "data-only", "data"),
    "data-zero-shot": lambda b: _uni(b, "data-zero-shot", "data", data_init="zero-shot"),
    "data-scratch": lambda b: _uni(b, "data-scratch", "data", data_init="scratch"),
    # loss / head masks
    "fusion-only": lambda b: _masked(b, "fusion-only", "1110", "001"),
    "ensemble-only": lambda b: _masked(b, "ensemble-only", "1100", "110"),
    "wo-news-head": lambda b: _masked(b, "wo-news-head", "0111", "011"),
    "wo-data-head": lambda b: _masked(b, "wo-data-head", "1011", "101"),
    "wo-news-data": lambda b: _masked(b, "wo-news-data", "0011", "001"),
    "wo-fusion": lambda b: _masked(b, "wo-fusion", "1101", "110"),
    "wo-alignment": lambda b: _masked(b, "wo-alignment", "1110", "111"),
    "wo-ensemble": lambda b: _masked(b, "wo-ensemble", "1111", "001"),
    # fusion variants, all with the fusion-only mask
    "fusion-attention": lambda b: _masked(b, "fusion-attention", "1110", "001", fusion="attention"),
    "fusion-transformer-1": lambda b: _masked(b, "fusion-transformer-1", "1110", "001",
                                              fusion="transformer", fusion_layers=1),
    "fusion-transformer-6": lambda b: _masked(b, "fusion-transformer-6", "1110", "001",
                                              fusion="transformer", fusion_layers=6),
    "fusion-inject-last": lambda b: _masked(b, "fusion-inject-last", "1110", "001", fusion="inject-last"),
    "fusion-inject-every": lambda b: _masked(b, "fusion-inject-every", "1110", "001", fusion="inject-every"),
    "fusion-linear": lambda b: _masked(b, "fusion-linear", "1110", "001", fusion="linear"),
    # two-head ensembles; the trained mixers learn through the fusion loss
    "ensemble-average": lambda b: _masked(b, "ensemble-average", "1100", "110", ensemble="average"),
    "ensemble-learnable": lambda b: _masked(b, "ensemble-learnable", "1110", "001", ensemble="learnable"),
    "ensemble-predicted": lambda b: _masked(b, "ensemble-predicted", "1110", "001", ensemble="predicted"),
    "ensemble-normalized": lambda b: _masked(b, "ensemble-normalized", "1100", "110", ensemble="normalized"),
    # both towers from random init
    "fusion-only-scratch": lambda b: _masked(b, "fusion-only-scratch", "1110", "001", **SCRATCH),
    "ensemble-only-scratch": lambda b: _masked(b, "ensemble-only-scratch", "1100", "110", **SCRATCH),
    "promuse-scratch": lambda b: _masked(b, "promuse-scratch", "1111", "111", **SCRATCH),
    "promuse-fine-tune": lambda b: _masked(b, "promuse-fine-tune", "1111", "111", paradigm="fine-tune"),
}


def preset(name: str, base: Optional[RunConfig] = None) -> RunConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return PRESETS[name](base or RunConfig()).validate()


def _grid(names: Sequence[str]) -> Callable[[RunConfig], List[RunConfig]]:
    return lambda base: [preset(n, base) for n in names]


def _sweep(base: RunConfig) -> List[RunConfig]:
    out = []
    for series in ("promuse", "promuse-scratch"):
        for f in FRACTIONS:
            c = preset(series, base)
            out.append(dataclasses.replace(c, name=f"{series}@{f:g}", data_fraction=f,
                                           epochs=SWEEP_EPOCHS))
    return out


MASK_ROWS = ("fusion-only", "ensemble-only", "wo-news-head", "wo-data-head", "wo-news-data",
             "wo-fusion", "wo-alignment", "wo-ensemble", "promuse")

GRIDS: Dict[str, Callable[[RunConfig], List[RunConfig]]] = {
    "main": _grid(("news-scratch", "news-zero-shot", "news-fine-tune", "news-only", "data-scratch",
                   "data-zero-shot", "data-only", "fusion-only-scratch", "fusion-only",
                   "ensemble-only-scratch", "ensemble-only", "promuse")),
    "masks": _grid(MASK_ROWS),
    "fusion": _grid(("fusion-attention", "fusion-transformer-1", "fusion-transformer-6",
                     "fusion-inject-last", "fusion-inject-every", "fusion-linear")),
    "paradigms": _grid(("news-hard-prompt", "news-soft-prompt", "news-fine-tune", "news-only",
                        "data-zero-shot", "data-only", "promuse-fine-tune", "promuse")),
    "ensembles": _grid(("ensemble-average", "ensemble-learnable", "ensemble-predicted",
                        "ensemble-normalized")),
    "datasize": _sweep,
}
# numbered aliases used by the command line
ALIASES = {"table3": "main", "table4": "masks", "table5": "fusion", "table6": "paradigms",
           "figure3": "ensembles", "figure4": "datasize"}


def grid(name: str, base: Optional[RunConfig] = None) -> List[RunConfig]:
    key = ALIASES.get(name, name)
    if key not in GRIDS:
        raise KeyError(f"unknown grid {name!r}; known: {', '.join(sorted(set(GRIDS) | set(ALIASES)))}")
    configs = GRIDS[key](base or RunConfig())
    check_unique(configs)
    return configs


def check_unique(configs: Sequence[RunConfig]) -> None:
    seen = set()
    for c in configs:
        if c.name in seen:
            raise ValueError(f"duplicate config name {c.name!r} in grid")
        seen.add(c.name)


def mask_string(bits) -> str:
    return "".join("1" if b else "0" for b in bits)


def audit(cfg: RunConfig, bundle: DataBundle, pre: Pretrained, n: int = 8) -> dict:
    """Gradient flow of one batch under the row's loss mask, compared with
    the groups the mask should reach."""
    if cfg.untrained:
        return {"status": "untrained", "flow": {}, "expected": {}}
    model = build_model(cfg, pre, cfg.seeds[0])
    split = bundle.splits["train"]
    flow = gradient_flow(model, split, np.arange(min(n, len(split))))
    expected = {g: v for g, v in expected_gradient_groups(cfg).items() if g in flow}
    ok = all(flow[g] == expected[g] for g in expected)
    return {"status": "ok" if ok else "mismatch", "flow": flow, "expected": expected}


def run_grid(configs: Sequence[RunConfig], bundle: DataBundle, pre: Pretrained,
             out_dir=None, dry_run: bool = False) -> List[dict]:
    """Audit every row, train it unless ``dry_run``, and write
    ``results.csv`` / ``results.json`` (plus ``curve.csv`` for sweeps)."""
    check_unique(configs)
    rows = []
    for cfg in configs:
        cfg.validate()
        row = {"name": cfg.name, "losses": mask_string(cfg.losses), "heads": mask_string(cfg.heads),
               "modalities": cfg.modalities, "paradigm": cfg.paradigm, "news_init": cfg.news_init,
               "data_init": cfg.data_init, "fusion": cfg.fusion, "fusion_layers": cfg.fusion_layers,
               "ensemble": cfg.ensemble, "data_fraction": cfg.data_fraction, "epochs": cfg.epochs,
               "seeds": list(cfg.seeds)}
        a = audit(cfg, bundle, pre)
        row["audit"] = a["status"]
        row["gradient_flow"] = a["flow"]
        if a["status"] == "mismatch":
            log.error("%s: gradient flow %s does not match mask %s", cfg.name, a["flow"], a["expected"])
        if not dry_run:
            sub = Path(out_dir) / cfg.name.replace("@", "_at_") if out_dir else None
            summary = train(cfg, bundle, pre, sub)
            row.update(mean=summary["test_acc_mean"], std=summary["test_acc_std"],
                       accs=summary["test_accs"])
        rows.append(row)
        log.info("grid row %s audit %s mean %s", cfg.name, row["audit"], row.get("mean"))
    if out_dir is not None:
        write_results(rows, Path(out_dir))
    return rows


CSV_FIELDS = ("name", "losses", "heads", "modalities", "paradigm", "news_init", "data_init", "fusion",
              "fusion_layers", "ensemble", "data_fraction", "epochs", "audit", "mean", "std")


def write_results(rows: Sequence[dict], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CSV_FIELDS})
    (out / "results.json").write_text(json.dumps(list(rows), indent=2, sort_keys=True) + "\n")
    if any("@" in r["name"] for r in rows) and all("mean" in r for r in rows):
        with open(out / "curve.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["series", "x", "y", "yerr"])
            for r in rows:
                series = r["name"].split("@")[0]
                w.writerow([series, r["data_fraction"], r["mean"], r["std"]])
