"""Synthetic market: joint headlines + intraday trading series whose next-day
first-slot volume movement depends on both modalities.

Generative story, per stock and trading day t:

* a latent volatility regime g_t follows a stationary AR(1);
* intraday prices take 10 slot returns with scale ``price_vol * exp(g_t)``,
  so the high/low range of a day tracks its regime;
* volumes of slots 2..10 follow a U-shaped profile scaled by ``exp(g_t)``;
* the first-slot volume of day t is ``v_bar_t * exp(z_t)`` where v_bar_t is
  the mean first-slot volume of the previous 20 days and

      z_t = text_weight * text_t + data_weight * data_t + noise_std * eps_t

  ``text_t`` is the summed signed intensity of the event words in that
  night's headline (0 without news) and ``data_t`` the standardised log
  ratio of the previous day's realised range to its 20-day average.

So the label of a window anchored on day t is exactly ``z_t > 0``.
"""
from __future__ import annotations

import configparser
import dataclasses
import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .market import N_DAYS, N_SLOTS, StockSeries, write_trading_csv
from .news import write_news_jsonl

# signed event lexicon: positive words push next-morning volume up
EVENT_LEXICON: Dict[str, float] = {
    "merger": 1.5, "acquisition": 1.5, "scandal": 1.5, "probe": 1.5,
    "earnings": 1.0, "upgrade": 1.0, "downgrade": 1.0, "buyback": 1.0,
    "dividend": 0.5, "launch": 0.5, "partnership": 0.5, "recall": 0.5,
    "steady": -0.5, "unchanged": -0.5, "routine": -0.5, "reaffirms": -0.5,
    "holiday": -1.0, "quiet": -1.0, "calm": -1.0, "flat": -1.0,
    "suspended": -1.5, "halted": -1.5, "dormant": -1.5, "idle": -1.5,
}
SUBJECT_WORDS = ["shares", "stock", "company", "group", "firm", "unit"]
VERB_WORDS = ["reports", "announces", "sees", "flags", "says", "notes"]
FILLER_WORDS = ["amid", "after", "before", "on", "with", "ahead", "of", "sector", "market", "news"]
TEMPLATES = [
    "{ticker} {subject} {verb} {e1}",
    "{ticker} {verb} {e1} {filler} {subject}",
    "{ticker} {e1} {filler} {e2}",
    "{subject} {e1} and {e2} at {ticker}",
    "{ticker} {subject} {e1} {filler} {filler2} {e2}",
]
# U-shaped intraday volume profile, first slot heaviest
SLOT_PROFILE = np.array([2.2, 1.3, 1.0, 0.85, 0.8, 0.8, 0.85, 0.95, 1.15, 1.6])
REGIME_PERSISTENCE = 0.8
REGIME_STD = 0.5
RANGE_SCALE = 0.45  # std of the raw log range ratio; divides it to ~unit variance
DATA_SIGNAL_CLIP = 3.0


@dataclass
class SynthConfig:
    n_stocks: int = 50
    n_days: int = 180
    text_signal_weight: float = 0.35
    data_signal_weight: float = 0.35
    noise_std: float = 0.3
    news_prob_train: float = 0.4
    news_prob_dev: float = 0.4
    news_prob_test: float = 0.4
    dev_days: int = 20
    test_days: int = 40
    price_vol: float = 0.006
    missing_day_rate: float = 0.0
    start_date: str = "2013-01-07"
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_stocks < 1:
            raise ValueError("n_stocks must be >= 1")
        if self.n_days < N_DAYS + 1 + self.dev_days + self.test_days:
            raise ValueError("n_days too small for 20-day history plus dev/test days")
        for name in ("text_signal_weight", "data_signal_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.text_signal_weight + self.data_signal_weight > 1.0 + 1e-12:
            raise ValueError("text_signal_weight + data_signal_weight must be <= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for name in ("news_prob_train", "news_prob_dev", "news_prob_test", "missing_day_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dev_days < 1 or self.test_days < 1:
            raise ValueError("dev_days and test_days must be >= 1")
        if self.price_vol <= 0:
            raise ValueError("price_vol must be > 0")
        dt.date.fromisoformat(self.start_date)
        return self

    def calendar(self) -> List[dt.date]:
        return business_days(dt.date.fromisoformat(self.start_date), self.n_days)

    def boundaries(self) -> Tuple[dt.date, dt.date]:
        cal = self.calendar()
        return cal[-(self.dev_days + self.test_days)], cal[-self.test_days]


def business_days(start: dt.date, n: int) -> List[dt.date]:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def default_paper_sizing(config: Optional[SynthConfig] = None) -> SynthConfig:
    """Sizes giving ~74,950/2,214/4,072 pre-training windows and
    ~8,483/687/938 filtered multimodal samples.

    553 stocks x (136 train + 4 dev + 7 test) anchor days gives the
    pre-training counts; the per-split news rates were calibrated against
    the significance filter on news nights and checked by `promuse synth --paper-sizing`.
    """
    base = config if config is not None else SynthConfig()
    return dataclasses.replace(base, n_stocks=553, n_days=N_DAYS + 136 + 4 + 7,
                               dev_days=4, test_days=7, news_prob_train=0.1534,
                               news_prob_dev=0.415, news_prob_test=0.327)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

@dataclass
class SimResult:
    config: SynthConfig
    calendar: List[dt.date]
    stock_ids: List[str]
    bars: np.ndarray  # (n_stocks, n_days, 10, 5)
    present: np.ndarray  # (n_stocks, n_days) bool, day kept in the files
    news: List[dict]  # {stock_id, date, text}
    text_signal: np.ndarray  # (n_stocks, n_days)
    data_signal: np.ndarray
    shock: np.ndarray

    def series(self) -> Dict[str, StockSeries]:
        out = {}
        for i, sid in enumerate(self.stock_ids):
            keep = self.present[i]
            out[sid] = StockSeries(sid, [d for d, k in zip(self.calendar, keep) if k],
                                   self.bars[i][keep])
        return out


def realized_range(bars_day: np.ndarray) -> np.ndarray:
    """Mean over slots of log(high / low); bars_day (..., 10, 5)."""
    return np.log(bars_day[..., 1] / bars_day[..., 2]).mean(axis=-1)


def data_signal_from_history(bars_hist: np.ndarray) -> np.ndarray:
    """Standardised log ratio of the last day's realised range to the
    20-day average range; bars_hist (..., 20, 10, 5)."""
    lr = np.log(realized_range(bars_hist))
    d = (lr[..., -1] - lr.mean(axis=-1)) / RANGE_SCALE
    return np.clip(d, -DATA_SIGNAL_CLIP, DATA_SIGNAL_CLIP)


def _headline(rng: np.random.Generator, ticker: str, words: List[str]) -> str:
    pool = [t for t in TEMPLATES if ("{e2}" in t) == (len(words) == 2)]
    tpl = pool[rng.integers(len(pool))]
    return tpl.format(ticker=ticker, subject=SUBJECT_WORDS[rng.integers(len(SUBJECT_WORDS))],
                      verb=VERB_WORDS[rng.integers(len(VERB_WORDS))],
                      filler=FILLER_WORDS[rng.integers(len(FILLER_WORDS))],
                      filler2=FILLER_WORDS[rng.integers(len(FILLER_WORDS))],
                      e1=words[0], e2=words[-1])


def simulate(config: SynthConfig) -> SimResult:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    n, t_days = cfg.n_stocks, cfg.n_days
    cal = cfg.calendar()
    dev_start, test_start = cfg.boundaries()
    stock_ids = [f"s{i:04d}" for i in range(n)]
    words = list(EVENT_LEXICON)
    intens = np.array([EVENT_LEXICON[w] for w in words])

    level = np.exp(rng.normal(np.log(2e5), 0.5, size=n))
    price0 = np.exp(rng.normal(np.log(1500.0), 0.6, size=n))

    g = np.empty((n, t_days))
    g[:, 0] = rng.normal(0.0, REGIME_STD, size=n)
    innov = REGIME_STD * np.sqrt(1 - REGIME_PERSISTENCE ** 2)
    for t in range(1, t_days):
        g[:, t] = REGIME_PERSISTENCE * g[:, t - 1] + innov * rng.normal(size=n)

    # prices: slot returns and wicks scale with exp(g)
    vol = cfg.price_vol * np.exp(g)[:, :, None]
    rets = vol * rng.normal(size=(n, t_days, N_SLOTS))
    gaps = 0.3 * cfg.price_vol * rng.normal(size=(n, t_days, 1))
    steps = np.concatenate([gaps, rets], axis=2).reshape(n, -1)
    logp = np.log(price0)[:, None] + np.cumsum(steps, axis=1)
    logp = logp.reshape(n, t_days, N_SLOTS + 1)
    log_open = np.concatenate([logp[:, :, :1], logp[:, :, 1:-1]], axis=2)
    log_close = logp[:, :, 1:]
    wick_hi = 0.7 * vol * np.abs(rng.normal(size=(n, t_days, N_SLOTS)))
    wick_lo = 0.7 * vol * np.abs(rng.normal(size=(n, t_days, N_SLOTS)))
    high = np.exp(np.maximum(log_open, log_close) + wick_hi)
    low = np.exp(np.minimum(log_open, log_close) - wick_lo)
    opn, close = np.exp(log_open), np.exp(log_close)
    # exp(max(a, b)) can round below exp(a); clamp so bars always bracket
    high = np.maximum(high, np.maximum(opn, close))
    low = np.minimum(low, np.minimum(opn, close))

    bars = np.empty((n, t_days, N_SLOTS, 5))
    bars[..., 1], bars[..., 2], bars[..., 3], bars[..., 4] = high, low, opn, close

    # overnight news and text signal
    split_prob = np.array([cfg.news_prob_train if d < dev_start else
                           cfg.news_prob_dev if d < test_start else cfg.news_prob_test
                           for d in cal])
    has_news = rng.random((n, t_days)) < split_prob[None, :]
    text = np.zeros((n, t_days))
    news = []
    for t in range(t_days):
        for i in np.flatnonzero(has_news[:, t]):
            k = 1 if rng.random() < 0.6 else 2
            idx = rng.choice(len(words), size=k, replace=False)
            text[i, t] = float(intens[idx].sum())
            news.append({"stock_id": stock_ids[i], "date": cal[t],
                         "text": _headline(rng, stock_ids[i], [words[j] for j in idx])})

    eps = rng.normal(size=(n, t_days))
    vol_noise = rng.normal(size=(n, t_days, N_SLOTS))

    data = np.zeros((n, t_days))
    shock = np.zeros((n, t_days))
    first = bars[:, :, 0, 0]
    ref = np.empty((n, t_days))
    for t in range(t_days):
        if t >= N_DAYS:
            data[:, t] = data_signal_from_history(bars[:, t - N_DAYS:t])
        z = (cfg.text_signal_weight * text[:, t] + cfg.data_signal_weight * data[:, t]
             + cfg.noise_std * eps[:, t])
        shock[:, t] = z
        if t < N_DAYS:
            ref[:, t] = level * SLOT_PROFILE[0]
        else:
            ref[:, t] = first[:, t - N_DAYS:t].mean(axis=1)
        first[:, t] = ref[:, t] * np.exp(z)
        rest = ref[:, t, None] * (SLOT_PROFILE[1:] / SLOT_PROFILE[0])[None, :]
        bars[:, t, 1:, 0] = rest * np.exp(g[:, t, None] + 0.15 * vol_noise[:, t, 1:])

    present = np.ones((n, t_days), dtype=bool)
    if cfg.missing_day_rate > 0:
        present = rng.random((n, t_days)) >= cfg.missing_day_rate
    return SimResult(cfg, cal, stock_ids, bars, present, news, text, data, shock)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

TRADING_FILE = "trading.csv"
NEWS_FILE = "news.jsonl"
CONFIG_FILE = "synth.cfg"
META_FILE = "dataset.json"


def _rows(sim: SimResult):
    for i, sid in enumerate(sim.stock_ids):
        for t, d in enumerate(sim.calendar):
            if not sim.present[i, t]:
                continue
            iso = d.isoformat()
            for j in range(N_SLOTS):
                v, h, lo, o, c = sim.bars[i, t, j]
                yield (sid, iso, j + 1, repr(float(v)), repr(float(h)), repr(float(lo)),
                       repr(float(o)), repr(float(c)))


def generate(config: SynthConfig, out_dir) -> Dict[str, Path]:
    """Simulate and write trading CSV, news JSONL, resolved config and split
    metadata into ``out_dir``. Same config -> byte-identical files."""
    sim = simulate(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trading": out / TRADING_FILE, "news": out / NEWS_FILE,
             "config": out / CONFIG_FILE, "meta": out / META_FILE}
    write_trading_csv(_rows(sim), paths["trading"])
    write_news_jsonl(sim.news, paths["news"])
    save_config(sim.config, paths["config"])
    dev_start, test_start = sim.config.boundaries()
    meta = {"dev_start": dev_start.isoformat(), "test_start": test_start.isoformat(),
            "n_stocks": sim.config.n_stocks, "n_days": sim.config.n_days,
            "config_sha256": config_hash(sim.config)}
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def config_hash(cfg: SynthConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_config(cfg: SynthConfig, path) -> None:
    """Plain key = value text under a [synth] section."""
    lines = ["[synth]"] + [f"{k} = {v}" for k, v in dataclasses.asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path, section: str = "synth") -> SynthConfig:
    cp = configparser.ConfigParser()
    cp.read_string(Path(path).read_text())
    if not cp.has_section(section):
        raise ValueError(f"{path}: missing [{section}] section")
    return config_from_mapping(dict(cp[section]))


def config_from_mapping(values: dict, base: Optional[SynthConfig] = None) -> SynthConfig:
    base = base if base is not None else SynthConfig()
    kinds = {f.name: f.type for f in dataclasses.fields(SynthConfig)}
    upd = {}
    for k, v in values.items():
        if k not in kinds:
            raise ValueError(f"unknown synth config key {k!r}")
        cur = getattr(base, k)
        upd[k] = type(cur)(v) if not isinstance(cur, str) else str(v)
    return dataclasses.replace(base, **upd).validate()
