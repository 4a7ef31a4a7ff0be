"""Trading-series ingestion, 20-day windows, labels, significance filter,
chronological splits and the statistical baselines (Random, EMA)."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from collections import defaultdict
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

N_DAYS = 20
N_SLOTS = 10
FIELDS = ("volume", "high", "low", "open", "close")
CSV_HEADER = ["stock_id", "date", "slot"] + list(FIELDS)
SIGNIFICANCE_THRESHOLD = 0.5
LOG_EPS = 1e-8
EMA_INIT_WEIGHT = 2.0 / 21.0
EMA_NEW_WEIGHT = 19.0 / 21.0


class IngestError(ValueError):
    pass


class SlotBar(NamedTuple):
    volume: float
    high: float
    low: float
    open: float
    close: float

    def is_valid(self) -> bool:
        vals = (self.volume, self.high, self.low, self.open, self.close)
        if not all(math.isfinite(v) for v in vals):
            return False
        lo, hi = min(self.open, self.close), max(self.open, self.close)
        return self.volume >= 0 and self.low <= lo and hi <= self.high


@dataclass
class TradingWindow:
    """20 days x 10 slots x (volume, high, low, open, close) plus the
    day-21 first-slot volume. ``anchor_date`` is the date of day 21."""

    stock_id: str
    anchor_date: dt.date
    bars: np.ndarray
    target_volume: Optional[float] = None

    def __post_init__(self):
        self.bars = np.asarray(self.bars, dtype=np.float64)
        if self.bars.shape != (N_DAYS, N_SLOTS, len(FIELDS)):
            raise ValueError(f"window bars must be (20, 10, 5), got {self.bars.shape}")
        if self.target_volume is not None and not self.target_volume >= 0:
            raise ValueError("target volume must be non-negative")

    @property
    def first_slot_volumes(self) -> np.ndarray:
        return self.bars[:, 0, 0]


@dataclass
class LabeledSample:
    window: TradingWindow
    news: object  # NewsDoc or None (missing-modality experiments)
    label: int
    v_bar: float
    sigma: float
    s: float

    @property
    def stock_id(self) -> str:
        return self.window.stock_id

    @property
    def anchor_date(self) -> dt.date:
        return self.window.anchor_date

    def manifest_record(self) -> dict:
        return {"stock_id": self.stock_id, "anchor_date": self.anchor_date.isoformat(),
                "label": int(self.label), "v_bar": float(self.v_bar),
                "sigma": float(self.sigma), "s": _json_float(self.s)}


def _json_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass
class StockSeries:
    stock_id: str
    dates: List[dt.date] = field(default_factory=list)
    bars: Optional[np.ndarray] = None  # (n_days, 10, 5)


def ingest_trading_csv(path) -> Dict[str, StockSeries]:
    """Parse the trading CSV into complete per-stock daily bar grids.

    A (stock, day) is discarded whole when it has fewer than 10 distinct
    slots or any row failing validation (non-finite field, negative volume,
    low/high not bracketing open/close). Malformed rows raise IngestError.
    """
    path = Path(path)
    days: Dict[Tuple[str, dt.date], Dict[int, SlotBar]] = defaultdict(dict)
    bad: set = set()
    n_rows = 0
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: empty file")
        if [h.strip() for h in header] != CSV_HEADER:
            raise IngestError(f"{path}:1: bad header {header!r}, expected {CSV_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise IngestError(f"{path}:{lineno}: expected 8 fields, got {len(row)}")
            try:
                sid = row[0].strip()
                date = dt.date.fromisoformat(row[1].strip())
                slot = int(row[2])
                bar = SlotBar(*(float(v) for v in row[3:]))
            except ValueError as e:
                raise IngestError(f"{path}:{lineno}: {e}") from None
            if not sid:
                raise IngestError(f"{path}:{lineno}: empty stock_id")
            if not 1 <= slot <= N_SLOTS:
                raise IngestError(f"{path}:{lineno}: slot {slot} outside 1..10")
            n_rows += 1
            key = (sid, date)
            if not bar.is_valid() or slot in days[key]:
                bad.add(key)
            days[key][slot] = bar
    if n_rows == 0:
        raise IngestError(f"{path}: no data rows")

    per_stock: Dict[str, List[Tuple[dt.date, np.ndarray]]] = defaultdict(list)
    dropped = 0
    for (sid, date), slots in days.items():
        if (sid, date) in bad or len(slots) != N_SLOTS:
            dropped += 1
            continue
        grid = np.array([slots[j] for j in range(1, N_SLOTS + 1)], dtype=np.float64)
        per_stock[sid].append((date, grid))
    if dropped:
        log.info("dropped %d incomplete or invalid stock-days", dropped)

    out = {}
    for sid in sorted(per_stock):
        rows = sorted(per_stock[sid], key=lambda r: r[0])
        out[sid] = StockSeries(sid, [r[0] for r in rows], np.stack([r[1] for r in rows]))
    return out


def trading_calendar(series: Dict[str, StockSeries]) -> List[dt.date]:
    """All dates on which any stock has a complete day."""
    return sorted({d for s in series.values() for d in s.dates})


def build_windows(series: Dict[str, StockSeries], calendar: Optional[Sequence[dt.date]] = None,
                  require_target: bool = True) -> List[TradingWindow]:
    """Slide a 20-day history (+ day-21 target) over each stock.

    A window needs 20 (or 21) consecutive calendar days all present for the
    stock. With ``require_target=False`` windows whose day 21 lies past the
    end of the data are also returned, with no target and anchored on the
    next calendar date if known, otherwise the day after day 20.
    Output is sorted by (anchor_date, stock_id).
    """
    cal = list(calendar) if calendar is not None else trading_calendar(series)
    pos = {d: i for i, d in enumerate(cal)}
    windows = []
    for sid, s in series.items():
        idx = np.array([pos[d] for d in s.dates])
        n = len(idx)
        for start in range(0, n - N_DAYS + 1):
            hist = idx[start:start + N_DAYS]
            if hist[-1] - hist[0] != N_DAYS - 1:
                continue
            nxt = start + N_DAYS
            if nxt < n and idx[nxt] == hist[-1] + 1:
                windows.append(TradingWindow(sid, s.dates[nxt], s.bars[start:nxt],
                                             float(s.bars[nxt, 0, 0])))
            elif not require_target and nxt >= n:
                last = s.dates[nxt - 1]
                anchor = cal[hist[-1] + 1] if hist[-1] + 1 < len(cal) else last + dt.timedelta(days=1)
                windows.append(TradingWindow(sid, anchor, s.bars[start:nxt], None))
    windows.sort(key=lambda w: (w.anchor_date, w.stock_id))
    return windows


# ---------------------------------------------------------------------------
# labels and filtering
# ---------------------------------------------------------------------------

# Decisions near a tie (label, significance sign, EMA rule) are taken in exact
# rational arithmetic so they do not depend on float summation order.

def _exact_first(window: TradingWindow) -> List[Fraction]:
    return [Fraction(float(v)) for v in window.first_slot_volumes]


def _exact_mean(xs: Sequence[Fraction]) -> Fraction:
    return sum(xs, Fraction(0)) / len(xs)


def _exact_var(xs: Sequence[Fraction], mean: Fraction) -> Fraction:
    return sum(((x - mean) ** 2 for x in xs), Fraction(0)) / len(xs)


def mean_first_slot_volume(window: TradingWindow) -> float:
    return float(_exact_mean(_exact_first(window)))


def first_slot_sigma(window: TradingWindow) -> float:
    """Population standard deviation (divisor 20) of first-slot volumes;
    exactly 0 for a constant series."""
    xs = _exact_first(window)
    return math.sqrt(float(_exact_var(xs, _exact_mean(xs))))


def compute_label(window: TradingWindow) -> int:
    """1 iff the day-21 first-slot volume strictly exceeds the 20-day mean."""
    if window.target_volume is None:
        raise ValueError("window has no target volume")
    return int(Fraction(float(window.target_volume)) > _exact_mean(_exact_first(window)))


def significance_score(window: TradingWindow) -> float:
    """(target - v_bar) / sigma; with sigma == 0 this is 0 for no movement
    and +/-inf for any movement."""
    xs = _exact_first(window)
    mean = _exact_mean(xs)
    diff = Fraction(float(window.target_volume)) - mean
    var = _exact_var(xs, mean)
    if var == 0:
        if diff == 0:
            return 0.0
        return math.copysign(math.inf, diff)
    try:  # the squared ratio in exact form survives subnormal variances
        sq = float(diff * diff / var)
    except OverflowError:
        sq = math.inf
    return math.copysign(math.sqrt(sq), diff)


def label_window(window: TradingWindow, news=None) -> LabeledSample:
    return LabeledSample(window, news, compute_label(window), mean_first_slot_volume(window),
                         first_slot_sigma(window), significance_score(window))


def is_significant(s: float) -> bool:
    return abs(s) > SIGNIFICANCE_THRESHOLD


def significance_filter(samples: Iterable[LabeledSample]) -> List[LabeledSample]:
    """Keep samples with |s| > 0.5."""
    return [x for x in samples if is_significant(x.s)]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def chronological_split(samples: Iterable, boundaries: Tuple[dt.date, dt.date]) -> Dict[str, list]:
    """train: date < dev_start; dev: dev_start <= date < test_start; test: rest.

    Membership depends only on each sample's anchor_date; within a split
    samples are ordered by (anchor_date, stock_id).
    """
    dev_start, test_start = boundaries
    if not dev_start < test_start:
        raise ValueError(f"split boundaries out of order: {dev_start} >= {test_start}")
    out = {"train": [], "dev": [], "test": []}
    for x in samples:
        d = x.anchor_date
        key = "train" if d < dev_start else ("dev" if d < test_start else "test")
        out[key].append(x)
    for v in out.values():
        v.sort(key=lambda x: (x.anchor_date, x.stock_id))
    return out


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def ema_series(first_slot: Sequence[float]) -> np.ndarray:
    """EMA_1 = x_1; EMA_n = (2 EMA_{n-1} + 19 x_n) / 21."""
    x = np.asarray(first_slot, dtype=np.float64)
    out = np.empty_like(x)
    out[0] = x[0]
    for n in range(1, len(x)):
        out[n] = (2.0 * out[n - 1] + 19.0 * x[n]) / 21.0
    return out


def ema_baseline(window: TradingWindow) -> int:
    """1 iff EMA_20 of raw first-slot volumes strictly exceeds v_bar
    (compared exactly)."""
    xs = _exact_first(window)
    ema = xs[0]
    for x in xs[1:]:
        ema = (2 * ema + 19 * x) / 21
    return int(ema > _exact_mean(xs))


def random_baseline(n: int, seed: int) -> np.ndarray:
    """n fair-coin predictions from a seeded generator."""
    return np.random.default_rng(seed).integers(0, 2, size=n)


# ---------------------------------------------------------------------------
# model inputs
# ---------------------------------------------------------------------------

def log_transform(bars: np.ndarray) -> np.ndarray:
    """Elementwise ln(x + 1e-8); (20, 10, 5) or (N, 20, 10, 5) in, the same
    flattened over (day, slot) to (..., 200, 5) out. The learnable CLS row is
    prepended by the Data Encoder, giving 201 positions."""
    bars = np.asarray(bars, dtype=np.float64)
    if (bars < 0).any():
        raise ValueError("log_transform: negative input")
    lead = bars.shape[:-3]
    return np.log(bars + LOG_EPS).reshape(lead + (N_DAYS * N_SLOTS, len(FIELDS)))


def write_samples_manifest(samples: Iterable[LabeledSample], path) -> None:
    with Path(path).open("w") as fh:
        for x in samples:
            fh.write(json.dumps(x.manifest_record(), sort_keys=True) + "\n")


def write_trading_csv(rows: Iterable[Sequence], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(rows)
