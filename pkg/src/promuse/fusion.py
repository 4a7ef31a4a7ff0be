"""Shared-space projection, fusion heads, and the cross-modal contrastive
alignment loss."""
from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .nn import HEAD_STD, Linear, Module, TransformerConfig, TransformerEncoder
from .params import ParameterSet
from .tensor import ShapeError, Tensor

D_ALIGN = 200
TEMPERATURE = 0.1
PROJ_STD = 0.02  # keeps the initial similarity logits near zero
FUSION_VARIANTS = ("linear", "attention", "transformer", "inject-last", "inject-every")
INJECT_LEN = 4


class Projector(Module):
    """Linear^News and Linear^Data into the d_align space (no normalisation)."""

    def __init__(self, params, d_news, d_data, rng, d_align=D_ALIGN, prefix="proj",
                 std: Optional[float] = PROJ_STD):
        super().__init__(params, prefix)
        self.d_news, self.d_data, self.d_align = d_news, d_data, d_align
        self.news = Linear(params, f"{prefix}.news", d_news, d_align, rng, std=std) if d_news else None
        self.data = Linear(params, f"{prefix}.data", d_data, d_align, rng, std=std) if d_data else None

    def __call__(self, h_news: Tensor, h_data: Tensor) -> Tuple[Tensor, Tensor]:
        if h_news.shape[-1] != self.d_news or h_data.shape[-1] != self.d_data:
            raise ShapeError("project", h_news.shape, h_data.shape,
                             detail=f"expected last dims {self.d_news} and {self.d_data}")
        return self.news(h_news), self.data(h_data)


class LinearFusion(Module):
    """logits = W_news v_news + W_data v_data + b."""

    def __init__(self, params, d_align, rng, prefix="fusion"):
        super().__init__(params, prefix)
        self.w_news = Linear(params, f"{prefix}.news", d_align, 2, rng, bias=False, std=HEAD_STD)
        self.w_data = Linear(params, f"{prefix}.data", d_align, 2, rng, bias=False, std=HEAD_STD)
        self.b = self.param("b", np.zeros(2))

    def __call__(self, v_news: Tensor, v_data: Tensor) -> Tensor:
        z = T.add(self.w_news(v_news), self.w_data(v_data))
        return T.add(z, T.expand(self.b, z.shape))


class AttentionFusion(Module):
    """(w1, w2) = softmax(Linear([v_news; v_data])); logits =
    Linear(w1 * v_news + w2 * v_data)."""

    def __init__(self, params, d_align, rng, prefix="fusion"):
        super().__init__(params, prefix)
        self.d = d_align
        self.gate = Linear(params, f"{prefix}.gate", 2 * d_align, 2, rng, std=HEAD_STD)
        self.out = Linear(params, f"{prefix}.out", d_align, 2, rng, std=HEAD_STD)
        self.last_weights: Optional[np.ndarray] = None

    def weights(self, v_news: Tensor, v_data: Tensor) -> Tensor:
        return T.softmax(self.gate(T.concat([v_news, v_data], axis=-1)), axis=-1)

    def __call__(self, v_news: Tensor, v_data: Tensor) -> Tensor:
        w = self.weights(v_news, v_data)
        self.last_weights = w.data
        ones = Tensor(np.ones((1, self.d)))
        w1 = T.matmul(T.getitem(w, (slice(None), slice(0, 1))), ones)
        w2 = T.matmul(T.getitem(w, (slice(None), slice(1, 2))), ones)
        return self.out(T.add(T.mul(w1, v_news), T.mul(w2, v_data)))


class TransformerFusion(Module):
    """Project both towers' full state sequences to d_align, concatenate,
    encode, and classify from the first (news CLS) position."""

    def __init__(self, params, d_news, d_data, rng, d_align=D_ALIGN, n_layers=1,
                 n_heads=4, dropout=0.1, prefix="fusion"):
        super().__init__(params, prefix)
        self.news = Linear(params, f"{prefix}.in_news", d_news, d_align, rng)
        self.data = Linear(params, f"{prefix}.in_data", d_data, d_align, rng)
        cfg = TransformerConfig(n_layers, d_align, n_heads, 4 * d_align, dropout, 1024)
        self.encoder = TransformerEncoder(params, f"{prefix}.encoder", cfg, rng)
        self.out = Linear(params, f"{prefix}.out", d_align, 2, rng, std=HEAD_STD)

    def __call__(self, news_states: Tensor, news_mask: np.ndarray, data_states: Tensor,
                 rng=None, training=False) -> Tensor:
        x = T.concat([self.news(news_states), self.data(data_states)], axis=1)
        b = news_mask.shape[0]
        kb = np.concatenate([np.where(news_mask, 0.0, -1e30), np.zeros((b, data_states.shape[1]))], axis=1)
        h = self.encoder(x, kb, first_only=True, rng=rng, training=training)
        return self.out(h)


class DataPromptInjector(Module):
    """Map h_CLS^Data to per-example key/value prefixes for the news
    backbone (last layer only, or every layer): affine -> tanh -> affine."""

    def __init__(self, params, d_data, d_news, n_layers, rng, every_layer: bool,
                 length: int = INJECT_LEN, prefix="inject"):
        super().__init__(params, prefix)
        self.d_news, self.n_layers, self.length = d_news, n_layers, length
        self.targets = list(range(n_layers)) if every_layer else [n_layers - 1]
        self.l1 = Linear(params, f"{prefix}.l1", d_data, d_news, rng)
        self.l2 = Linear(params, f"{prefix}.l2", d_news, len(self.targets) * length * 2 * d_news, rng,
                         std=0.02)

    def __call__(self, h_data: Tensor) -> List:
        b = h_data.shape[0]
        out = T.reshape(self.l2(T.tanh(self.l1(h_data))),
                        (b, len(self.targets), self.length, 2 * self.d_news))
        d = self.d_news
        prefixes: List = [None] * self.n_layers
        for j, layer in enumerate(self.targets):
            prefixes[layer] = (T.getitem(out, (slice(None), j, slice(None), slice(0, d))),
                               T.getitem(out, (slice(None), j, slice(None), slice(d, 2 * d))))
        return prefixes


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def similarity_matrix(v_news: Tensor, v_data: Tensor) -> Tensor:
    """Sim[i, j] = v_news[i] . v_data[j] (plain dot product)."""
    if v_news.ndim != 2 or v_news.shape != v_data.shape:
        raise ShapeError("similarity_matrix", v_news.shape, v_data.shape,
                         detail="need equal (B, d) batches")
    return T.matmul(v_news, T.transpose(v_data, (1, 0)))


def _diag_mean(m: Tensor) -> Tensor:
    b = m.shape[0]
    return T.scale(T.sum(T.mul(m, Tensor(np.eye(b)))), 1.0 / b)


def n2d_loss(sim: Tensor, tau: float = TEMPERATURE) -> Tensor:
    """Mean over rows of -log softmax(row / tau)[diagonal]."""
    return T.scale(_diag_mean(T.log_softmax(T.scale(sim, 1.0 / tau), axis=1)), -1.0)


def d2n_loss(sim: Tensor, tau: float = TEMPERATURE) -> Tensor:
    """Same over columns."""
    return T.scale(_diag_mean(T.log_softmax(T.scale(sim, 1.0 / tau), axis=0)), -1.0)


def alignment_loss(sim: Tensor, tau: float = TEMPERATURE) -> Tensor:
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError("alignment_loss", sim.shape, detail="Sim must be square")
    return T.add(n2d_loss(sim, tau), d2n_loss(sim, tau))
