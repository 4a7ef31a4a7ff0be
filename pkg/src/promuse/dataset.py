"""From files on disk to model-ready arrays: ingestion, windowing, pairing,
filtering, chronological split, vocabulary, and the pre-training windows."""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .encoders import TEMPLATE_WORDS
from .market import (LOG_EPS, LabeledSample, build_windows, chronological_split, ingest_trading_csv,
                     log_transform, significance_filter, trading_calendar)
from .news import (DEFAULT_MAX_LEN, PairingReport, Vocab, build_vocab, make_doc, pad_batch,
                   pair_samples, read_news_jsonl)

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


@dataclass
class Split:
    """Model-ready arrays for one split of the labelled multimodal data."""

    samples: List[LabeledSample]
    token_ids: List[List[int]]
    grids: np.ndarray  # (N, 200, 5) log inputs
    labels: np.ndarray  # (N,)
    v_bar: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split([self.samples[i] for i in idx], [self.token_ids[i] for i in idx],
                     self.grids[idx], self.labels[idx], self.v_bar[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        for x in self.samples:
            h.update(f"{x.stock_id}|{x.anchor_date.isoformat()}|{x.label}\n".encode())
        return h.hexdigest()


@dataclass
class PretrainSplit:
    grids: np.ndarray
    log_targets: np.ndarray

    def __len__(self):
        return len(self.log_targets)


@dataclass
class DataBundle:
    vocab: Vocab
    splits: Dict[str, Split]
    pretrain: Dict[str, PretrainSplit]
    boundaries: Tuple[dt.date, dt.date]
    report: dict = field(default_factory=dict)

    def split_hashes(self) -> Dict[str, str]:
        return {k: v.digest() for k, v in self.splits.items()}


def read_boundaries(data_dir) -> Tuple[dt.date, dt.date]:
    meta = Path(data_dir) / "dataset.json"
    if not meta.exists():
        raise FileNotFoundError(str(meta))
    m = json.loads(meta.read_text())
    return dt.date.fromisoformat(m["dev_start"]), dt.date.fromisoformat(m["test_start"])


def _to_split(samples: List[LabeledSample]) -> Split:
    if samples:
        grids = log_transform(np.stack([x.window.bars for x in samples]))
    else:
        grids = np.zeros((0, 200, 5))
    return Split(samples, [list(x.news.token_ids) for x in samples], grids,
                 np.array([x.label for x in samples], dtype=np.int64),
                 np.array([x.v_bar for x in samples], dtype=np.float64))


def load_bundle(data_dir, vocab: Optional[Vocab] = None, max_len: int = DEFAULT_MAX_LEN,
                with_pretrain: bool = True) -> DataBundle:
    """Build every split from ``trading.csv``, ``news.jsonl``, ``dataset.json``.

    The vocabulary is built from training-split headlines (plus the
    template words) unless one is supplied.
    """
    data_dir = Path(data_dir)
    for name in ("trading.csv", "news.jsonl", "dataset.json"):
        if not (data_dir / name).exists():
            raise FileNotFoundError(str(data_dir / name))
    boundaries = read_boundaries(data_dir)
    series = ingest_trading_csv(data_dir / "trading.csv")
    windows = build_windows(series, trading_calendar(series))
    news = read_news_jsonl(data_dir / "news.jsonl")
    if vocab is None:
        train_text = [r["text"] for r in news if r["date"] < boundaries[0]]
        vocab = build_vocab(train_text, extra_tokens=TEMPLATE_WORDS)
    docs = [make_doc(r["text"], vocab, r["stock_id"], r["date"], max_len) for r in news]
    rep = PairingReport()
    paired = pair_samples(docs, windows, rep)
    kept = significance_filter(paired)
    parts = chronological_split(kept, boundaries)
    splits = {k: _to_split(parts[k]) for k in SPLITS}
    pre = {}
    if with_pretrain:
        wparts = chronological_split(windows, boundaries)
        for k in SPLITS:
            ws = wparts[k]
            g = log_transform(np.stack([w.bars for w in ws])) if ws else np.zeros((0, 200, 5))
            t = np.log(np.array([w.target_volume for w in ws], dtype=np.float64) + LOG_EPS)
            pre[k] = PretrainSplit(g, t)
    report = {"windows": len(windows), "paired": len(paired), "kept": len(kept),
              "counts": {k: len(v) for k, v in splits.items()},
              "pretrain_counts": {k: len(v) for k, v in pre.items()},
              "pairing": rep.__dict__}
    return DataBundle(vocab, splits, pre, boundaries, report)


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    """Index batches; shuffled when an rng is given, in order otherwise."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def news_batch(split: Split, idx) -> Tuple[np.ndarray, np.ndarray]:
    return pad_batch([split.token_ids[i] for i in idx])
