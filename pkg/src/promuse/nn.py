"""Layers built on the tensor ops: affine maps, layer norm, pre-LN transformer
encoder with optional per-layer key/value prefixes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .tensor import Tensor

NEG_INF = -1e30  # additive key bias for masked keys; exp() underflows to exactly 0
HEAD_STD = 0.0  # classifier heads start at zero: uniform predictions, no init noise


@dataclass
class TransformerConfig:
    n_layers: int = 6
    d: int = 200
    n_heads: int = 4
    ff_dim: int = 800
    dropout: float = 0.1
    max_positions: int = 201

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"hidden size {self.d} not divisible by {self.n_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.n_layers, self.d, self.n_heads, self.ff_dim, self.max_positions) <= 0:
            raise ValueError("transformer sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    def __init__(self, params: ParameterSet, prefix: str):
        self.params = params
        self.prefix = prefix

    def param(self, name: str, value, trainable: bool = True) -> Tensor:
        return self.params.add(f"{self.prefix}.{name}", value, trainable)


class Linear(Module):
    def __init__(self, params, prefix, n_in, n_out, rng: np.random.Generator,
                 bias: bool = True, std: Union[float, str, None] = None):
        """``std``: None for Xavier-uniform, "fan_in" for U(-1/sqrt(n_in),
        1/sqrt(n_in)), or a float for N(0, std) (0 gives zeros)."""
        super().__init__(params, prefix)
        if std is None:
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        elif std == "fan_in":
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        else:
            w = rng.normal(0.0, std, size=(n_in, n_out))
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, params, prefix, d, eps: float = 1e-5):
        super().__init__(params, prefix)
        self.gamma = self.param("gamma", np.ones(d))
        self.beta = self.param("beta", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


Prefix = Tuple[Tensor, Tensor]  # (keys, values), each (P, d) or per-example (B, P, d)


class MultiHeadAttention(Module):
    def __init__(self, params, prefix, d, n_heads, rng):
        super().__init__(params, prefix)
        self.d, self.h, self.dh = d, n_heads, d // n_heads
        self.q = Linear(params, f"{prefix}.q", d, d, rng)
        self.k = Linear(params, f"{prefix}.k", d, d, rng)
        self.v = Linear(params, f"{prefix}.v", d, d, rng)
        self.o = Linear(params, f"{prefix}.o", d, d, rng)
        self.record = False
        self.last_probs: Optional[np.ndarray] = None

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.h, self.dh)), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor, key_bias: np.ndarray,
                 prefix: Optional[Prefix] = None) -> Tensor:
        """xq (B, Lq, d) attends to [prefix keys ; xkv] with key_bias (B, P+Lk)."""
        b = xq.shape[0]
        k = self.k(xkv)
        v = self.v(xkv)
        if prefix is not None:
            pk, pv = prefix
            if pk.ndim == 2:
                pk = T.expand(pk, (b,) + pk.shape)
                pv = T.expand(pv, (b,) + pv.shape)
            k = T.concat([pk, k], axis=1)
            v = T.concat([pv, v], axis=1)
        q = self._heads(self.q(xq))
        kh = T.transpose(T.reshape(k, (b, k.shape[1], self.h, self.dh)), (0, 2, 3, 1))
        vh = self._heads(v)
        probs = T.masked_softmax(T.matmul(q, kh), key_bias, 1.0 / math.sqrt(self.dh))
        if self.record:
            self.last_probs = probs.data
        ctx = T.matmul(probs, vh)
        lq = xq.shape[1]
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, self.d))
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, params, prefix, d, ff, rng):
        super().__init__(params, prefix)
        self.up = Linear(params, f"{prefix}.up", d, ff, rng)
        self.down = Linear(params, f"{prefix}.down", ff, d, rng)

    def __call__(self, x):
        return self.down(T.gelu(self.up(x)))


class TransformerLayer(Module):
    """Pre-LN block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, params, prefix, cfg: TransformerConfig, rng):
        super().__init__(params, prefix)
        self.ln1 = LayerNorm(params, f"{prefix}.ln1", cfg.d)
        self.attn = MultiHeadAttention(params, f"{prefix}.attn", cfg.d, cfg.n_heads, rng)
        self.ln2 = LayerNorm(params, f"{prefix}.ln2", cfg.d)
        self.ffn = FeedForward(params, f"{prefix}.ffn", cfg.d, cfg.ff_dim, rng)
        self.p_drop = cfg.dropout

    def __call__(self, x, key_bias, prefix=None, first_only=False, rng=None, training=False):
        h = self.ln1(x)
        hq = T.getitem(h, (slice(None), slice(0, 1))) if first_only else h
        a = self.attn(hq, h, key_bias, prefix)
        base = T.getitem(x, (slice(None), slice(0, 1))) if first_only else x
        x = T.add(base, T.dropout(a, self.p_drop, rng, training))
        f = self.ffn(self.ln2(x))
        return T.add(x, T.dropout(f, self.p_drop, rng, training))


class TransformerEncoder(Module):
    def __init__(self, params, prefix, cfg: TransformerConfig, rng):
        super().__init__(params, prefix)
        self.cfg = cfg
        self.layers = [TransformerLayer(params, f"{prefix}.layers.{i}", cfg, rng)
                       for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm(params, f"{prefix}.ln_f", cfg.d)

    def __call__(self, x: Tensor, key_bias: np.ndarray,
                 prefixes: Optional[Sequence[Optional[Prefix]]] = None,
                 first_only: bool = False, rng=None, training: bool = False) -> Tensor:
        """Return final hidden states (B, L, d), or (B, d) for position 0 only.

        ``key_bias`` is one (B, P+L) array, or a per-layer list when layers
        carry prefixes of different lengths.

        With ``first_only`` the last layer computes just the position-0 query,
        which is exact because no later layer reads the other positions.
        """
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            pref = prefixes[i] if prefixes is not None else None
            kb = key_bias[i] if isinstance(key_bias, (list, tuple)) else key_bias
            x = layer(x, kb, pref, first_only and i == n - 1, rng, training)
        x = self.ln_f(x)
        if first_only:
            return T.reshape(x, (x.shape[0], x.shape[2]))
        return x

    def set_record(self, flag: bool):
        for layer in self.layers:
            layer.attn.record = flag
