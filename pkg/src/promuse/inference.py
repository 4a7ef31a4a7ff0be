"""Ensemble inference over the three heads' class distributions, the
missing-modality fallback, the alternative two-head ensembles, and accuracy.

Everything here works on plain arrays of shape (2,) or (N, 2); no part of
it touches the alignment similarity matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

SUM_TOL = 1e-9


def _dist(p, name: str) -> Optional[np.ndarray]:
    if p is None:
        return None
    a = np.asarray(p, dtype=np.float64)
    if a.shape[-1] != 2:
        raise ValueError(f"{name}: expected 2-class distributions, got shape {a.shape}")
    if (a < 0).any() or np.abs(a.sum(axis=-1) - 1.0).max() > SUM_TOL:
        raise ValueError(f"{name}: not a probability distribution")
    return a


@dataclass
class PredictionTriple:
    p_news: Optional[np.ndarray] = None
    p_data: Optional[np.ndarray] = None
    p_fusion: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p_news = _dist(self.p_news, "p_news")
        self.p_data = _dist(self.p_data, "p_data")
        self.p_fusion = _dist(self.p_fusion, "p_fusion")
        if not self.present():
            raise ValueError("prediction triple needs at least one head")

    def present(self):
        return [p for p in (self.p_news, self.p_data, self.p_fusion) if p is not None]

    def masked(self, news: bool = True, data: bool = True, fusion: bool = True) -> "PredictionTriple":
        return PredictionTriple(self.p_news if news else None, self.p_data if data else None,
                                self.p_fusion if fusion else None)


def argmax_down_ties(p: np.ndarray) -> np.ndarray:
    """Class index per row; an exact tie goes to class 0 (down)."""
    p = np.asarray(p)
    return (p[..., 1] > p[..., 0]).astype(np.int64)


def average_distribution(triple: PredictionTriple) -> np.ndarray:
    heads = triple.present()
    return sum(heads) / len(heads)


def ensemble_predict(triple: PredictionTriple) -> np.ndarray:
    """Equal-weight average of all three heads, then argmax (ties -> 0)."""
    if triple.p_news is None or triple.p_data is None or triple.p_fusion is None:
        raise ValueError("ensemble_predict needs all three heads; use missing_modality_predict")
    return argmax_down_ties((triple.p_news + triple.p_data + triple.p_fusion) / 3.0)


def missing_modality_predict(triple: PredictionTriple) -> np.ndarray:
    """Average whichever heads are present (news-only input has only the
    news head, data-only only the data head)."""
    return argmax_down_ties(average_distribution(triple))


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"accuracy: length mismatch {pred.shape} vs {lab.shape}")
    if lab.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * float((pred == lab).sum()) / lab.size


# ---------------------------------------------------------------------------
# two-head ensemble variants
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def learnable_mix(p_news, p_data, w: float) -> np.ndarray:
    """sigmoid(w) P_news + (1 - sigmoid(w)) P_data."""
    s = _sigmoid(w)
    return s * np.asarray(p_news) + (1.0 - s) * np.asarray(p_data)


def predicted_weights(features: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """softmax(Linear([h_news; h_data])) -> (N, 2) mixture weights."""
    z = np.asarray(features) @ w + b
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predicted_mix(p_news, p_data, weights) -> np.ndarray:
    weights = np.asarray(weights)
    return weights[..., :1] * np.asarray(p_news) + weights[..., 1:2] * np.asarray(p_data)


@dataclass
class EnsembleCalibration:
    """Per-head, per-class moments of the dev-set distributions."""

    mu_news: np.ndarray
    sigma_news: np.ndarray
    mu_data: np.ndarray
    sigma_data: np.ndarray

    @classmethod
    def fit(cls, p_news_dev, p_data_dev) -> "EnsembleCalibration":
        pn, pd = np.asarray(p_news_dev), np.asarray(p_data_dev)
        sn, sd = pn.std(axis=0), pd.std(axis=0)
        if (sn <= 0).any() or (sd <= 0).any():
            raise ValueError("calibration: a head's dev distribution has zero spread")
        return cls(pn.mean(axis=0), sn, pd.mean(axis=0), sd)

    def normalized_score(self, p_news, p_data) -> np.ndarray:
        """Norm(P_news) + Norm(P_data) + 0.5, a per-class score."""
        return ((np.asarray(p_news) - self.mu_news) / self.sigma_news
                + (np.asarray(p_data) - self.mu_data) / self.sigma_data + 0.5)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("mu_news", "sigma_news", "mu_data", "sigma_data")}


def ensemble_variant(kind: str, p_news, p_data, *, w: float = 1.0, features=None,
                     head_w=None, head_b=None,
                     calibration: Optional[EnsembleCalibration] = None) -> np.ndarray:
    """Dispatch to one of the two-head ensembles; returns per-class values
    whose argmax (ties -> 0) is the prediction."""
    if kind == "average":
        return (np.asarray(p_news) + np.asarray(p_data)) / 2.0
    if kind == "learnable":
        return learnable_mix(p_news, p_data, w)
    if kind == "predicted":
        return predicted_mix(p_news, p_data, predicted_weights(features, head_w, head_b))
    if kind == "normalized":
        if calibration is None:
            raise ValueError("normalized ensemble needs a dev-set calibration")
        return calibration.normalized_score(p_news, p_data)
    raise ValueError(f"unknown ensemble variant {kind!r}")
