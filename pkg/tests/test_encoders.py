import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promuse import tensor as T
from promuse.encoders import (CLS, InputNorm, DataEncoder, NewsEncoder, PromptBank, bag_of_words,
                              data_config, mask_tokens, news_config, pretrain_loss)
from promuse.gradcheck import check_gradients
from promuse.news import MASK, N_RESERVED, build_vocab, encode_headline, pad_batch
from promuse.nn import NEG_INF
from promuse.params import ParameterSet
from promuse.tensor import ShapeError, Tensor

NCFG = news_config(n_layers=2, d=8, n_heads=2, dropout=0.0, max_positions=24)
DCFG = data_config(n_layers=1, d=8, n_heads=2, dropout=0.0)


def encoder(paradigm, seed=0, vocab_size=30, prompt_len=3):
    return NewsEncoder(ParameterSet(), vocab_size, NCFG, np.random.default_rng(seed), paradigm, prompt_len)


def batch(rng, b=3, n=6, vocab_size=30):
    ids = rng.integers(N_RESERVED, vocab_size, size=(b, n))
    ids[:, 0] = CLS
    mask = np.ones((b, n), bool)
    mask[0, 4:] = False
    return ids, mask


def test_zero_prefix_with_masked_keys_equals_prompt_free_forward():
    enc = encoder("fine-tune")
    ids, mask = batch(np.random.default_rng(1))
    plain = enc.forward(ids, mask).data
    zeros = [(Tensor(np.zeros((3, 8))), Tensor(np.zeros((3, 8))))] * NCFG.n_layers
    masked = enc.forward(ids, mask, prefix_override=zeros, prefix_key_bias=np.full(3, NEG_INF)).data
    assert np.max(np.abs(plain - masked)) < 1e-12


def test_prompt_mode_freezes_backbone_only():
    enc = encoder("prompt")
    p = enc.params
    assert all(n.startswith("news.backbone.") for n in p.frozen_names())
    assert {n.split(".")[1] for n in p.trainable_names()} == {"prompts", "head"}
    ft = encoder("fine-tune")
    assert all(n.startswith("news.backbone.mlm") for n in ft.params.frozen_names())


def test_deep_prompts_have_one_prefix_per_layer():
    bank = PromptBank(ParameterSet(), "pb", 3, 8, np.random.default_rng(0), prompt_len=5)
    pre = bank.prefixes()
    assert len(pre) == 3 and pre[0][0].shape == (5, 8)


def test_padding_does_not_change_cls_state():
    enc = encoder("prompt")
    rng = np.random.default_rng(2)
    ids, mask = batch(rng)
    a = enc.forward(ids, mask).data
    ids2 = ids.copy()
    ids2[0, 4:] = 7
    assert np.allclose(a, enc.forward(ids2, mask).data, atol=1e-12)


def test_prompt_gradients():
    enc = encoder("prompt")
    for n in enc.params.trainable_names():
        enc.params[n].data[...] += 0.1 * np.random.default_rng(3).normal(size=enc.params[n].shape)
    ids, mask = batch(np.random.default_rng(4))
    y = np.array([0, 1, 1])
    f = lambda: T.cross_entropy(enc.logits(enc.forward(ids, mask)), y)
    assert check_gradients(f, [enc.params["news.prompts.source"], enc.params["news.head.w"]]) < 1e-3


def test_template_wrapping():
    v = build_vocab(["shares rally"], extra_tokens=("news", "the", "volume", "will", "go", "down", "up"))
    enc = NewsEncoder(ParameterSet(), len(v), NCFG, np.random.default_rng(0), "hard-prompt")
    enc.bind_vocab(v)
    ids, pos = enc.wrap_template(encode_headline("shares rally", v))
    words = [v.token(i) for i in ids]
    assert words == ["[CLS]", "news", "shares", "rally", "the", "volume", "will", "go", "[MASK]"]
    assert pos == len(ids) - 1
    long_ids, _ = enc.wrap_template([CLS] + [N_RESERVED] * 100)
    assert len(long_ids) <= NCFG.max_positions
    p, h = enc.template_distribution([encode_headline("shares rally", v)])
    assert np.allclose(p.sum(axis=1), 1.0) and h.shape == (1, 8)


def test_data_encoder_shapes_and_errors():
    enc = DataEncoder(ParameterSet(), DCFG, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 200, 5))
    assert enc.forward(x).shape == (2, 8)
    assert enc.forward(x, full_states=True).shape == (2, 201, 8)
    with pytest.raises(ShapeError):
        enc.forward(x[:, :199])
    bad = x.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        enc.forward(bad)


def test_pretrain_loss_gradient():
    enc = DataEncoder(ParameterSet(), DCFG, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    x, t = rng.normal(size=(3, 200, 5)), rng.normal(size=3)
    f = lambda: pretrain_loss(enc, x, t)
    assert check_gradients(f, [enc.params["data.pre.w"], enc.params["data.cls"]]) < 1e-3


def test_input_norm_round_trip():
    g = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 200, 5))
    n = InputNorm.fit(g)
    z = n.apply(g).reshape(-1, 5)
    assert np.allclose(z.mean(0), 0, atol=1e-9) and np.allclose(z.std(0), 1)
    assert InputNorm.from_dict(n.to_dict()) == n


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
def test_mask_tokens_only_touches_content(seed, rate):
    rng = np.random.default_rng(seed)
    ids, mask = batch(rng, b=4, n=7)
    out, flat, orig = mask_tokens(ids, mask, rate, rng)
    assert flat.size >= 1
    assert np.all(out.reshape(-1)[flat] == MASK)
    assert np.all(ids.reshape(-1)[flat] == orig)
    assert np.all(out[:, 0] == CLS)
    assert np.all(out[~mask] == ids[~mask])


def test_bag_of_words_rows_are_distributions():
    ids, mask = pad_batch([[CLS, 5, 5, 6], [CLS]])
    q = bag_of_words(ids, mask, 8)
    assert np.allclose(q.sum(1), 1)
    assert np.isclose(q[0, 5], 2 / 3) and np.allclose(q[1], 1 / 8)
