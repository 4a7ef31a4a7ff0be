import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promuse.dataset import load_bundle
from promuse.market import ingest_trading_csv
from promuse.synth import (EVENT_LEXICON, SynthConfig, config_from_mapping, default_paper_sizing,
                           generate, load_config, save_config, simulate)

SMALL = SynthConfig(n_stocks=4, n_days=80, dev_days=5, test_days=5, seed=11)


def digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_same_seed_gives_identical_files(tmp_path):
    generate(SMALL, tmp_path / "a")
    generate(SMALL, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    generate(dataclasses.replace(SMALL, seed=12), tmp_path / "c")
    assert digest(tmp_path / "a")["trading.csv"] != digest(tmp_path / "c")["trading.csv"]


def test_label_is_the_sign_of_the_latent_shock():
    s = simulate(SMALL)
    for i in range(SMALL.n_stocks):
        for t in range(20, SMALL.n_days):
            up = s.bars[i, t, 0, 0] > s.bars[i, t - 20:t, 0, 0].mean()
            if abs(s.shock[i, t]) > 1e-9:
                assert up == (s.shock[i, t] > 0)


def test_text_signal_is_lexicon_sum():
    s = simulate(SMALL)
    idx = {sid: i for i, sid in enumerate(s.stock_ids)}
    for rec in s.news[:50]:
        t = s.calendar.index(rec["date"])
        words = [w for w in rec["text"].split() if w in EVENT_LEXICON]
        assert np.isclose(s.text_signal[idx[rec["stock_id"]], t], sum(EVENT_LEXICON[w] for w in words))


def test_bars_are_valid_and_ingest_cleanly(tmp_path):
    generate(SMALL, tmp_path)
    series = ingest_trading_csv(tmp_path / "trading.csv")
    assert len(series) == SMALL.n_stocks
    b = next(iter(series.values())).bars
    assert b.shape == (SMALL.n_days, 10, 5)
    assert (b[..., 0] >= 0).all() and (b[..., 2] <= np.minimum(b[..., 3], b[..., 4])).all()


def test_config_round_trip(tmp_path):
    save_config(SMALL, tmp_path / "s.cfg")
    assert load_config(tmp_path / "s.cfg") == SMALL
    with pytest.raises(ValueError):
        config_from_mapping({"nope": "1"})


@pytest.mark.parametrize("kw", [dict(n_stocks=0), dict(n_days=30), dict(text_signal_weight=0.7,
                                data_signal_weight=0.7), dict(noise_std=-1.0), dict(news_prob_dev=1.5),
                                dict(price_vol=0.0), dict(start_date="not a date")])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        dataclasses.replace(SMALL, **kw).validate()


def test_default_sizing_counts():
    # the desk dataset the acceptance runs use
    cfg = SynthConfig()
    assert (cfg.n_stocks, cfg.n_days, cfg.text_signal_weight, cfg.data_signal_weight) == (50, 180, 0.35, 0.35)
    big = default_paper_sizing()
    assert big.n_stocks == 553 and big.dev_days == 4 and big.test_days == 7


def test_splits_are_chronological(tmp_path):
    generate(SMALL, tmp_path)
    b = load_bundle(tmp_path)
    dev_start, test_start = b.boundaries
    assert all(x.anchor_date < dev_start for x in b.splits["train"].samples)
    assert all(dev_start <= x.anchor_date < test_start for x in b.splits["dev"].samples)
    assert all(x.anchor_date >= test_start for x in b.splits["test"].samples)
    assert all(abs(x.s) > 0.5 for k in b.splits for x in b.splits[k].samples)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5), st.integers(0, 100))
def test_weights_zero_out_their_signal(a_t, a_d, seed):
    s = simulate(dataclasses.replace(SMALL, text_signal_weight=a_t, data_signal_weight=a_d,
                                     noise_std=0.0, seed=seed))
    t = slice(20, None)
    assert np.allclose(s.shock[:, t], a_t * s.text_signal[:, t] + a_d * s.data_signal[:, t])
