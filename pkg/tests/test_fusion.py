import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promuse import tensor as T
from promuse.fusion import (AttentionFusion, DataPromptInjector, LinearFusion, Projector,
                            TransformerFusion, alignment_loss, d2n_loss, n2d_loss, similarity_matrix)
from promuse.gradcheck import check_gradients
from promuse.params import ParameterSet
from promuse.tensor import ShapeError, Tensor


def sim_of(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_single_pair_alignment_is_exactly_zero():
    assert alignment_loss(sim_of([[3.7]])).item() == 0.0


@pytest.mark.parametrize("b", [2, 3, 8, 32])
def test_uniform_similarity_gives_two_log_b(b):
    assert abs(alignment_loss(sim_of(np.full((b, b), 0.3))).item() - 2 * math.log(b)) < 1e-9


def test_cross_entropy_of_zero_logits_is_log_two():
    ce = T.cross_entropy(Tensor(np.zeros((5, 2))), np.array([0, 1, 1, 0, 1]))
    assert abs(ce.item() - math.log(2)) < 1e-12


def test_directions_swap_under_transpose():
    s = np.random.default_rng(0).normal(size=(5, 5))
    assert math.isclose(n2d_loss(sim_of(s)).item(), d2n_loss(sim_of(s.T)).item(), rel_tol=1e-12)


def test_n2d_matches_hand_computation():
    s = np.random.default_rng(1).normal(size=(4, 4))
    z = s / 0.1
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    assert math.isclose(n2d_loss(sim_of(s)).item(), float(np.mean(lse - np.diag(z))), rel_tol=1e-12)


def test_similarity_is_plain_dot_product():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert np.allclose(similarity_matrix(Tensor(a), Tensor(b)).data, a @ b.T)
    with pytest.raises(ShapeError):
        similarity_matrix(Tensor(a), Tensor(b[:2]))


def test_bad_alignment_inputs():
    with pytest.raises(ShapeError):
        alignment_loss(sim_of(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        alignment_loss(sim_of(np.zeros((2, 2))), tau=0.0)


def test_alignment_gradient():
    rng = np.random.default_rng(3)
    vn = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    vd = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    err = check_gradients(lambda: alignment_loss(similarity_matrix(vn, vd)), [vn, vd])
    assert err < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(-50, 50))
def test_alignment_nonnegative_and_shift_invariant(b, seed, c):
    s = np.random.default_rng(seed).normal(size=(b, b))
    base = alignment_loss(sim_of(s)).item()
    assert base >= -1e-12
    assert math.isclose(alignment_loss(sim_of(s + c)).item(), base, rel_tol=1e-9, abs_tol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_diagonal_dominance_lowers_the_loss(b, seed):
    s = np.random.default_rng(seed).normal(size=(b, b))
    boosted = s + 5.0 * np.eye(b)
    assert alignment_loss(sim_of(boosted)).item() < alignment_loss(sim_of(s)).item()


def test_fusion_heads_shapes_and_zero_init():
    rng = np.random.default_rng(0)
    p = ParameterSet()
    proj = Projector(p, 6, 4, rng, d_align=8)
    vn, vd = proj(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 4))))
    assert vn.shape == vd.shape == (3, 8)
    lin = LinearFusion(p, 8, rng)
    att = AttentionFusion(p, 8, rng, prefix="att")
    assert np.all(lin(vn, vd).data == 0)  # zero-init heads: uniform start
    assert att(vn, vd).shape == (3, 2)
    assert np.allclose(att.last_weights.sum(axis=1), 1.0)
    with pytest.raises(ShapeError):
        proj(Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 4))))


def test_transformer_fusion_ignores_padded_news_tokens():
    rng = np.random.default_rng(1)
    p = ParameterSet()
    tf = TransformerFusion(p, 6, 4, rng, d_align=8, n_layers=1, n_heads=2, dropout=0.0)
    for n in p.trainable_names():  # leave the zero head behind
        p[n].data[...] += rng.normal(scale=0.1, size=p[n].shape)
    news = rng.normal(size=(2, 5, 6))
    mask = np.array([[True] * 3 + [False] * 2] * 2)
    data = rng.normal(size=(2, 3, 4))
    a = tf(Tensor(news), mask, Tensor(data)).data
    news[:, 3:] = 99.0
    b = tf(Tensor(news), mask, Tensor(data)).data
    assert np.allclose(a, b, atol=1e-12)


def test_injector_targets_last_or_every_layer():
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(size=(2, 4)))
    last = DataPromptInjector(ParameterSet(), 4, 6, 3, rng, every_layer=False)(h)
    every = DataPromptInjector(ParameterSet(), 4, 6, 3, rng, every_layer=True)(h)
    assert [x is None for x in last] == [True, True, False]
    assert all(x is not None for x in every)
    k, v = last[2]
    assert k.shape == v.shape == (2, 4, 6)
