import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from promuse.inference import (EnsembleCalibration, PredictionTriple, accuracy, argmax_down_ties,
                               ensemble_predict, ensemble_variant, learnable_mix, missing_modality_predict,
                               predicted_mix, predicted_weights)


def dist(p_up):
    p = np.asarray(p_up, dtype=np.float64)
    return np.stack([1.0 - p, p], axis=-1)


probs = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12)


def test_ties_go_down():
    assert argmax_down_ties(np.array([[0.5, 0.5], [0.4, 0.6], [0.6, 0.4]])).tolist() == [0, 1, 0]


def test_three_head_average():
    t = PredictionTriple(dist([0.9]), dist([0.2]), dist([0.45]))
    # mean up-prob 0.5167 -> up
    assert ensemble_predict(t).tolist() == [1]
    t2 = PredictionTriple(dist([0.9]), dist([0.1]), dist([0.5]))
    assert ensemble_predict(t2).tolist() == [0]  # exact tie


def test_missing_modality_uses_present_head_only():
    t = PredictionTriple(p_news=dist([0.7, 0.3]))
    assert missing_modality_predict(t).tolist() == [1, 0]
    with pytest.raises(ValueError):
        ensemble_predict(t)
    with pytest.raises(ValueError):
        PredictionTriple()


def test_invalid_distributions_are_rejected():
    with pytest.raises(ValueError):
        PredictionTriple(np.array([[0.7, 0.7]]))
    with pytest.raises(ValueError):
        PredictionTriple(np.array([[1.2, -0.2]]))
    with pytest.raises(ValueError):
        PredictionTriple(np.array([[0.2, 0.3, 0.5]]))


def test_accuracy():
    assert accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 50.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 0])


@settings(max_examples=60, deadline=None)
@given(probs, probs, probs)
def test_ensemble_equals_mean_up_probability_rule(a, b, c):
    n = min(len(a), len(b), len(c))
    a, b, c = a[:n], b[:n], c[:n]
    t = PredictionTriple(dist(a), dist(b), dist(c))
    mean = (dist(a) + dist(b) + dist(c)) / 3
    assert np.array_equal(ensemble_predict(t), (mean[:, 1] > mean[:, 0]).astype(int))
    # dropping heads never yields an invalid distribution
    for mask in ((True, False, False), (False, True, False), (True, True, False)):
        avg = sum(t.masked(*mask).present()) / sum(mask)
        assert np.allclose(avg.sum(axis=1), 1.0)


@settings(max_examples=40, deadline=None)
@given(probs, st.floats(-20, 20))
def test_learnable_mix_is_a_distribution(a, w):
    p = learnable_mix(dist(a), dist(a[::-1]), w)
    assert np.allclose(p.sum(axis=1), 1.0) and (p >= 0).all()


def test_learnable_mix_endpoints():
    pn, pd = dist([0.9]), dist([0.2])
    assert np.allclose(learnable_mix(pn, pd, 0.0), (pn + pd) / 2)
    assert np.allclose(learnable_mix(pn, pd, 50.0), pn)


def test_predicted_weights_softmax():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 6))
    w = predicted_weights(f, rng.normal(size=(6, 2)), np.zeros(2))
    assert np.allclose(w.sum(axis=1), 1.0)
    mix = predicted_mix(dist(rng.uniform(size=5)), dist(rng.uniform(size=5)), w)
    assert np.allclose(mix.sum(axis=1), 1.0)


def test_normalized_ensemble_uses_dev_moments():
    rng = np.random.default_rng(1)
    pn_dev, pd_dev = dist(rng.uniform(size=30)), dist(rng.uniform(0.4, 0.6, size=30))
    cal = EnsembleCalibration.fit(pn_dev, pd_dev)
    assert np.allclose(cal.mu_news, pn_dev.mean(axis=0))
    score = ensemble_variant("normalized", pn_dev, pd_dev, calibration=cal)
    manual = (pn_dev - pn_dev.mean(0)) / pn_dev.std(0) + (pd_dev - pd_dev.mean(0)) / pd_dev.std(0) + 0.5
    assert np.allclose(score, manual)
    with pytest.raises(ValueError):
        ensemble_variant("normalized", pn_dev, pd_dev)
    with pytest.raises(ValueError):
        EnsembleCalibration.fit(dist([0.5, 0.5]), pd_dev[:2])
    with pytest.raises(ValueError):
        ensemble_variant("bogus", pn_dev, pd_dev)
