"""Word-level headline tokenizer, vocabulary, and news/window pairing."""
from __future__ import annotations

import datetime as dt
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .market import LabeledSample, label_window

log = logging.getLogger(__name__)

PAD, UNK, CLS, MASK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[MASK]")
N_RESERVED = len(RESERVED)
DEFAULT_MAX_LEN = 32
DEFAULT_MAX_SIZE = 8192

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> List[str]:
    """Lowercase; anything that is not a letter or digit separates tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str], max_size: int = DEFAULT_MAX_SIZE):
        if len(tokens) + N_RESERVED > max_size:
            raise ValueError("vocabulary exceeds max_size")
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.max_size = max_size

    def __len__(self):
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        """One non-reserved token per line; line k holds id k + 4."""
        Path(path).write_text("".join(t + "\n" for t in self.itos[N_RESERVED:]))

    @classmethod
    def load(cls, path, max_size: int = DEFAULT_MAX_SIZE) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln], max_size)


def build_vocab(corpus: Iterable[str], max_size: int = DEFAULT_MAX_SIZE,
                extra_tokens: Sequence[str] = ()) -> Vocab:
    """Frequency-ranked vocabulary; ties broken lexicographically.

    ``extra_tokens`` (e.g. hard-prompt template words) are appended after
    the corpus tokens when not already present. Tokens beyond ``max_size``
    are left out and encode to UNK.
    """
    counts = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tokenize(text))
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    seen = set(ranked)
    ranked += [t for t in extra_tokens if t not in seen]
    return Vocab(ranked[:max_size - N_RESERVED], max_size)


@dataclass
class NewsDoc:
    text: str
    token_ids: List[int]
    stock_id: str = ""
    date: Optional[dt.date] = None

    def __post_init__(self):
        if not self.token_ids or self.token_ids[0] != CLS:
            raise ValueError("token_ids must start with CLS")

    @property
    def anchor_date(self):
        return self.date


def encode_headline(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> List[int]:
    """[CLS] + token ids, truncated on the right to max_len."""
    ids = [CLS] + [vocab.id(t) for t in tokenize(text)]
    return ids[:max_len]


def decode(ids: Sequence[int], vocab: Vocab) -> List[str]:
    return [vocab.token(i) for i in ids if i >= N_RESERVED]


def make_doc(text: str, vocab: Vocab, stock_id: str = "", date=None,
             max_len: int = DEFAULT_MAX_LEN) -> NewsDoc:
    return NewsDoc(text, encode_headline(text, vocab, max_len), stock_id, date)


def pad_batch(docs_ids: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns (ids (B, L), valid mask (B, L) of bools)."""
    n = max(len(x) for x in docs_ids)
    ids = np.full((len(docs_ids), n), PAD, dtype=np.int64)
    mask = np.zeros((len(docs_ids), n), dtype=bool)
    for i, x in enumerate(docs_ids):
        ids[i, :len(x)] = x
        mask[i, :len(x)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def read_news_jsonl(path) -> List[dict]:
    """Records {stock_id, date (date), text} in file order."""
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append({"stock_id": str(rec["stock_id"]),
                            "date": dt.date.fromisoformat(rec["date"]),
                            "text": str(rec["text"])})
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad news record ({e})") from None
    return out


def write_news_jsonl(records: Iterable[dict], path) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            d = r["date"]
            fh.write(json.dumps({"stock_id": r["stock_id"],
                                 "date": d.isoformat() if isinstance(d, dt.date) else d,
                                 "text": r["text"]}) + "\n")


# ---------------------------------------------------------------------------
# pairing
# ---------------------------------------------------------------------------

@dataclass
class PairingReport:
    duplicate_news: int = 0
    duplicate_windows: int = 0
    windows_without_news: int = 0
    news_without_window: int = 0


def pair_samples(news_docs: Iterable[NewsDoc], windows: Iterable,
                 report: Optional[PairingReport] = None) -> List[LabeledSample]:
    """Inner join of news and labelled windows on (stock_id, anchor date).

    Duplicate keys on either side keep the first occurrence in input order
    and are counted (and logged) as warnings. Output follows window order.
    """
    report = report if report is not None else PairingReport()
    by_key: Dict[tuple, NewsDoc] = {}
    for doc in news_docs:
        key = (doc.stock_id, doc.date)
        if key in by_key:
            report.duplicate_news += 1
            continue
        by_key[key] = doc
    seen = set()
    out = []
    for w in windows:
        key = (w.stock_id, w.anchor_date)
        if key in seen:
            report.duplicate_windows += 1
            continue
        seen.add(key)
        doc = by_key.get(key)
        if doc is None:
            report.windows_without_news += 1
            continue
        out.append(label_window(w, doc))
    report.news_without_window = len(by_key) - len(out)
    if report.duplicate_news or report.duplicate_windows:
        log.warning("pairing kept first of duplicate keys: %d news, %d windows",
                    report.duplicate_news, report.duplicate_windows)
    return out
