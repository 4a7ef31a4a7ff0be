"""The two unimodal towers.

NewsEncoder: token + position embeddings and a transformer backbone that is
pre-trained with masked-token prediction and then frozen; task adaptation
goes through a PromptBank of per-layer key/value prefixes. DataEncoder: a
transformer over the 201-row log trading grid (CLS row + 20 days x 10
slots), pre-trained to regress the next first-slot log volume.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .nn import HEAD_STD, NEG_INF, Linear, Module, Prefix, TransformerConfig, TransformerEncoder
from .news import CLS, MASK, N_RESERVED, PAD, Vocab, pad_batch, tokenize
from .optim import AdamWState, adamw_step
from .params import ParameterSet
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

PARADIGMS = ("prompt", "fine-tune", "soft-prompt", "hard-prompt", "zero-shot")
PROMPT_LEN = 20
# hard-prompt template; [MASK] is scored against the verbaliser words
TEMPLATE_HEAD = "news"
TEMPLATE_TAIL = "the volume will go"
VERBALIZER = ("down", "up")  # class 0, class 1
TEMPLATE_WORDS = tuple(tokenize(TEMPLATE_HEAD + " " + TEMPLATE_TAIL)) + VERBALIZER

DATA_ROWS = 200
DATA_FIELDS = 5


def news_config(n_layers=4, d=128, n_heads=4, ff_dim=None, dropout=0.1, max_positions=64):
    return TransformerConfig(n_layers, d, n_heads, ff_dim or 4 * d, dropout, max_positions)


def data_config(n_layers=6, d=200, n_heads=4, ff_dim=None, dropout=0.1):
    return TransformerConfig(n_layers, d, n_heads, ff_dim or 4 * d, dropout, DATA_ROWS + 1)


def _key_bias(mask: np.ndarray, n_prefix: int = 0,
              prefix_bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Additive key bias (B, P + L): 0 for visible keys, NEG_INF for padding."""
    tok = np.where(mask, 0.0, NEG_INF)
    if n_prefix == 0:
        return tok
    pb = np.zeros(n_prefix) if prefix_bias is None else np.asarray(prefix_bias, dtype=np.float64)
    return np.concatenate([np.broadcast_to(pb, (mask.shape[0], n_prefix)), tok], axis=1)


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

class PromptBank(Module):
    """Prompt source embeddings plus the reparameterisation network.

    deep=True: sources (n_layers, P, d_prompt) -> affine -> tanh -> affine
    -> per-layer key and value prefixes (P, d). deep=False: one (P, d_prompt)
    source mapped to P input-level prompt token embeddings (P, d).
    """

    def __init__(self, params, prefix, n_layers, d, rng, prompt_len=PROMPT_LEN,
                 d_prompt=None, deep=True):
        super().__init__(params, prefix)
        d_prompt = d_prompt or d
        self.deep, self.n_layers, self.prompt_len, self.d = deep, n_layers, prompt_len, d
        n_src = n_layers if deep else 1
        self.source = self.param("source", rng.normal(0.0, 1.0, size=(n_src, prompt_len, d_prompt)))
        self.l1 = Linear(params, f"{prefix}.reparam.l1", d_prompt, d, rng)
        self.l2 = Linear(params, f"{prefix}.reparam.l2", d, 2 * d if deep else d, rng)

    def _reparam(self) -> Tensor:
        return self.l2(T.tanh(self.l1(self.source)))

    def prefixes(self) -> List[Prefix]:
        out = self._reparam()
        d = self.d
        return [(T.getitem(out, (i, slice(None), slice(0, d))),
                 T.getitem(out, (i, slice(None), slice(d, 2 * d)))) for i in range(self.n_layers)]

    def tokens(self) -> Tensor:
        return T.reshape(self._reparam(), (self.prompt_len, self.d))


# ---------------------------------------------------------------------------
# news tower
# ---------------------------------------------------------------------------

class NewsBackbone(Module):
    """Embeddings, transformer and masked-token head (names ``<prefix>.*``)."""

    def __init__(self, params, prefix, vocab_size, cfg: TransformerConfig, rng):
        super().__init__(params, prefix)
        self.cfg, self.vocab_size = cfg, vocab_size
        self.tok = self.param("tok_emb", rng.normal(0.0, 0.02, size=(vocab_size, cfg.d)))
        self.pos = self.param("pos_emb", rng.normal(0.0, 0.02, size=(cfg.max_positions, cfg.d)))
        self.encoder = TransformerEncoder(params, f"{prefix}.encoder", cfg, rng)
        self.mlm = Linear(params, f"{prefix}.mlm", cfg.d, vocab_size, rng, std=0.02)
        # sentence-level head: CLS state -> headline bag of words
        self.bow = Linear(params, f"{prefix}.bow", cfg.d, vocab_size, rng, std=0.02)

    def embed(self, ids: np.ndarray) -> Tensor:
        b, n = ids.shape
        if n > self.cfg.max_positions:
            raise ShapeError("embed", ids.shape, detail=f"sequence over max_positions={self.cfg.max_positions}")
        pos = T.getitem(self.pos, (slice(0, n),))
        return T.add(T.embedding(self.tok, ids), T.expand(pos, (b, n, self.cfg.d)))

    def states(self, ids, mask, rng=None, training=False) -> Tensor:
        x = self.embed(ids)
        return self.encoder(x, _key_bias(mask), rng=rng, training=training)

    def mlm_logits_at(self, states: Tensor, flat_positions: np.ndarray) -> Tensor:
        """Masked-token logits for rows of the flattened (B*L) hidden states."""
        b, n, d = states.shape
        rows = T.embedding(T.reshape(states, (b * n, d)), flat_positions)
        return self.mlm(rows)


class NewsEncoder(Module):
    """Backbone + PromptBank + Linear-Head^News under a tuning paradigm.

    prompt: frozen backbone, per-layer key/value prefixes.
    soft-prompt: frozen backbone, prompt tokens inserted after CLS.
    fine-tune: whole backbone trainable (masked-token head excepted).
    hard-prompt / zero-shot: nothing trainable; headline wrapped in the
    template and the distribution read off the masked-token head.
    """

    def __init__(self, params: ParameterSet, vocab_size: int, cfg: TransformerConfig,
                 rng: np.random.Generator, paradigm: str = "prompt",
                 prompt_len: int = PROMPT_LEN, prefix: str = "news"):
        if paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {paradigm!r}; expected one of {PARADIGMS}")
        super().__init__(params, prefix)
        self.cfg, self.paradigm, self.prompt_len = cfg, paradigm, prompt_len
        self.backbone = NewsBackbone(params, f"{prefix}.backbone", vocab_size, cfg, rng)
        self.prompts: Optional[PromptBank] = None
        if paradigm in ("prompt", "soft-prompt"):
            self.prompts = PromptBank(params, f"{prefix}.prompts", cfg.n_layers, cfg.d, rng,
                                      prompt_len, deep=paradigm == "prompt")
        self.head = Linear(params, f"{prefix}.head", cfg.d, 2, rng, std=HEAD_STD)
        self.verbalizer_ids: Optional[Tuple[int, int]] = None
        self.template_ids: Optional[Tuple[List[int], List[int]]] = None
        self.apply_freeze()

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def backbone_prefix(self) -> str:
        return self.backbone.prefix + "."

    @property
    def scores_with_template(self) -> bool:
        return self.paradigm in ("hard-prompt", "zero-shot")

    def apply_freeze(self) -> None:
        p = self.params
        if self.paradigm == "fine-tune":
            p.unfreeze(self.backbone_prefix)
            p.freeze(self.backbone.mlm.prefix + ".")
        else:
            p.freeze(self.backbone_prefix)
        if self.scores_with_template:
            p.freeze(self.head.prefix + ".")

    def bind_vocab(self, vocab: Vocab) -> None:
        """Resolve template and verbaliser ids (template paradigms only)."""
        ids = [vocab.id(w) for w in TEMPLATE_WORDS]
        if any(i < N_RESERVED for i in ids):
            raise ValueError("vocabulary lacks template/verbaliser words; build it with "
                             "extra_tokens=TEMPLATE_WORDS")
        self.template_ids = ([vocab.id(w) for w in tokenize(TEMPLATE_HEAD)],
                             [vocab.id(w) for w in tokenize(TEMPLATE_TAIL)])
        self.verbalizer_ids = (vocab.id(VERBALIZER[0]), vocab.id(VERBALIZER[1]))

    def wrap_template(self, token_ids: Sequence[int]) -> Tuple[List[int], int]:
        """[CLS] news <headline> the volume will go [MASK]; returns ids and
        the [MASK] position. The headline is cut so the result fits."""
        if self.template_ids is None:
            raise RuntimeError("bind_vocab() must be called before template scoring")
        head, tail = self.template_ids
        body = [i for i in token_ids if i != CLS]
        room = self.cfg.max_positions - 2 - len(head) - len(tail)
        ids = [CLS] + head + body[:max(room, 0)] + tail + [MASK]
        return ids, len(ids) - 1

    # -- forward ----------------------------------------------------------
    def forward(self, ids: np.ndarray, mask: np.ndarray, rng=None, training: bool = False,
                extra_prefixes: Optional[Sequence[Optional[Prefix]]] = None,
                prefix_override: Optional[Sequence[Prefix]] = None,
                prefix_key_bias: Optional[np.ndarray] = None,
                full_states: bool = False) -> Tensor:
        """Final CLS hidden state (B, d), or all states (B, L, d).

        ``extra_prefixes`` are per-layer, per-example (B, P2, d) prefixes
        appended after the prompt prefixes (data-conditioned injection).
        ``prefix_override`` replaces the PromptBank output and
        ``prefix_key_bias`` (P,) is added to the prefix keys' scores.
        """
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=bool)
        bb = self.backbone
        x = bb.embed(ids)
        b = ids.shape[0]
        if self.paradigm == "soft-prompt":
            toks = T.expand(self.prompts.tokens(), (b, self.prompt_len, self.d))
            x = T.concat([T.getitem(x, (slice(None), slice(0, 1))), toks,
                          T.getitem(x, (slice(None), slice(1, None)))], axis=1)
            mask = np.concatenate([mask[:, :1], np.ones((b, self.prompt_len), bool), mask[:, 1:]], axis=1)
        prefixes: Optional[List[Optional[Prefix]]] = None
        if prefix_override is not None:
            prefixes = list(prefix_override)
        elif self.paradigm == "prompt":
            prefixes = self.prompts.prefixes()
        if extra_prefixes is None:
            n_pref = prefixes[0][0].shape[-2] if prefixes else 0
            kb = _key_bias(mask, n_pref, prefix_key_bias)
        else:
            prefixes, kb = _merge_prefixes(prefixes, extra_prefixes, mask, b, prefix_key_bias,
                                           self.cfg.n_layers)
        return bb.encoder(x, kb, prefixes, first_only=not full_states, rng=rng, training=training)

    def logits(self, h_cls: Tensor) -> Tensor:
        return self.head(h_cls)

    def template_distribution(self, token_lists: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
        """Verbaliser distribution over (down, up) at the [MASK] slot, and
        the CLS states. No gradients; used by the untuned paradigms."""
        wrapped = [self.wrap_template(t) for t in token_lists]
        ids, mask = pad_batch([w[0] for w in wrapped])
        with T.no_grad():
            states = self.backbone.states(ids, mask)
            n = ids.shape[1]
            flat = np.array([i * n + pos for i, (_, pos) in enumerate(wrapped)])
            lg = self.backbone.mlm_logits_at(states, flat).data[:, list(self.verbalizer_ids)]
        lg = lg - lg.max(axis=1, keepdims=True)
        p = np.exp(lg)
        p /= p.sum(axis=1, keepdims=True)
        return p, states.data[:, 0, :]


def _merge_prefixes(base, extra, mask, b, base_bias, n_layers):
    """Append per-example prefixes to each layer's prompt prefixes; returns
    the merged prefixes and a per-layer key-bias list."""
    prefs, biases = [], []
    for i in range(n_layers):
        parts = []
        bias = []
        if base is not None and base[i] is not None:
            pk, pv = base[i]
            if pk.ndim == 2:
                pk, pv = T.expand(pk, (b,) + pk.shape), T.expand(pv, (b,) + pv.shape)
            parts.append((pk, pv))
            bias.append(np.zeros(pk.shape[1]) if base_bias is None else np.asarray(base_bias, float))
        if extra[i] is not None:
            parts.append(extra[i])
            bias.append(np.zeros(extra[i][0].shape[1]))
        if not parts:
            prefs.append(None)
            biases.append(_key_bias(mask))
            continue
        prefs.append((T.concat([p[0] for p in parts], axis=1), T.concat([p[1] for p in parts], axis=1)))
        pb = np.concatenate(bias)
        biases.append(_key_bias(mask, pb.size, pb))
    return prefs, biases


def news_head_distribution(h_cls: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """softmax(h @ w + b) for plain arrays."""
    z = np.asarray(h_cls) @ w + b
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# data tower
# ---------------------------------------------------------------------------

@dataclass
class InputNorm:
    """Fixed per-field affine standardisation of the log grid, fitted on the
    pre-training train split. Stored in checkpoint manifests."""

    shift: Tuple[float, ...] = (0.0,) * DATA_FIELDS
    scale: Tuple[float, ...] = (1.0,) * DATA_FIELDS

    @classmethod
    def fit(cls, log_grids: np.ndarray) -> "InputNorm":
        x = np.asarray(log_grids).reshape(-1, DATA_FIELDS)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        return cls(tuple(float(v) for v in x.mean(axis=0)), tuple(float(v) for v in sd))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - np.array(self.shift)) / np.array(self.scale)

    def to_dict(self) -> dict:
        return {"shift": list(self.shift), "scale": list(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "InputNorm":
        return cls(tuple(float(v) for v in d["shift"]), tuple(float(v) for v in d["scale"]))


class DataEncoder(Module):
    def __init__(self, params: ParameterSet, cfg: TransformerConfig, rng: np.random.Generator,
                 prefix: str = "data", norm: Optional[InputNorm] = None):
        super().__init__(params, prefix)
        if cfg.max_positions != DATA_ROWS + 1:
            raise ValueError("data encoder needs max_positions == 201")
        self.cfg = cfg
        self.norm = norm or InputNorm()
        self.cls = self.param("cls", rng.normal(0.0, 1.0, size=(DATA_FIELDS,)))
        self.in_proj = Linear(params, f"{prefix}.in_proj", DATA_FIELDS, cfg.d, rng)
        self.pos = self.param("pos_emb", rng.normal(0.0, 0.1, size=(DATA_ROWS + 1, cfg.d)))
        self.encoder = TransformerEncoder(params, f"{prefix}.encoder", cfg, rng)
        self.pre = Linear(params, f"{prefix}.pre", cfg.d, 1, rng, std=0.02)
        self.head = Linear(params, f"{prefix}.head", cfg.d, 2, rng, std=HEAD_STD)

    @property
    def d(self) -> int:
        return self.cfg.d

    def forward(self, log_grid: np.ndarray, rng=None, training=False,
                full_states: bool = False, input_tensor: Optional[Tensor] = None) -> Tensor:
        """log_grid (B, 200, 5) -> CLS state (B, d) or all states (B, 201, d).

        ``input_tensor`` lets gradient checks differentiate w.r.t. the
        (already standardised) input rows.
        """
        if input_tensor is None:
            x = np.asarray(log_grid, dtype=np.float64)
            if x.ndim != 3 or x.shape[1:] != (DATA_ROWS, DATA_FIELDS):
                raise ShapeError("encode_data", x.shape, (None, DATA_ROWS, DATA_FIELDS),
                                 detail="expected 200 rows of 5 fields (201 with CLS)")
            if not np.isfinite(x).all():
                raise ValueError("encode_data: non-finite input")
            xt = Tensor(self.norm.apply(x))
        else:
            xt = input_tensor
        b = xt.shape[0]
        rows = T.concat([T.expand(T.reshape(self.cls, (1, DATA_FIELDS)), (b, 1, DATA_FIELDS)), xt], axis=1)
        h = T.add(self.in_proj(rows), T.expand(self.pos, (b, DATA_ROWS + 1, self.d)))
        kb = np.zeros((b, DATA_ROWS + 1))
        return self.encoder(h, kb, first_only=not full_states, rng=rng, training=training)

    def forecast(self, h_cls: Tensor) -> Tensor:
        """Linear-Pre: next first-slot log volume, (B,)."""
        out = self.pre(h_cls)
        return T.reshape(out, (out.shape[0],))

    def logits(self, h_cls: Tensor) -> Tensor:
        return self.head(h_cls)


def pretrain_loss(enc: DataEncoder, log_grids: np.ndarray, log_targets: np.ndarray,
                  rng=None, training=False) -> Tensor:
    """Batch-mean squared error of Linear-Pre against log target volumes."""
    h = enc.forward(log_grids, rng=rng, training=training)
    return T.mse(enc.forecast(h), np.asarray(log_targets, dtype=np.float64))


# ---------------------------------------------------------------------------
# masked-token pre-training of the news backbone
# ---------------------------------------------------------------------------

@dataclass
class MLMConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    mask_rate: float = 0.15
    bow_weight: float = 1.0
    seed: int = 0

    def validate(self) -> "MLMConfig":
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1); with 0 the loss is undefined")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        return self


def mask_tokens(ids: np.ndarray, valid: np.ndarray, rate: float,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace ~rate of non-special tokens with [MASK]; at least one per batch.

    Returns (masked ids, flat positions, original ids at those positions).
    """
    cand = valid & (ids >= N_RESERVED)
    pick = cand & (rng.random(ids.shape) < rate)
    if not pick.any():
        flat_c = np.flatnonzero(cand)
        if flat_c.size == 0:
            raise ValueError("batch has no maskable tokens")
        pick.flat[flat_c[rng.integers(flat_c.size)]] = True
    flat = np.flatnonzero(pick)
    out = ids.copy()
    out[pick] = MASK
    return out, flat, ids.reshape(-1)[flat]


def bag_of_words(ids: np.ndarray, valid: np.ndarray, vocab_size: int) -> np.ndarray:
    """Normalised counts of non-special tokens per row (uniform if none)."""
    q = np.zeros((ids.shape[0], vocab_size))
    keep = valid & (ids >= N_RESERVED)
    rows = np.nonzero(keep)[0]
    np.add.at(q, (rows, ids[keep]), 1.0)
    tot = q.sum(axis=1, keepdims=True)
    empty = tot[:, 0] == 0
    q[empty] = 1.0
    return q / q.sum(axis=1, keepdims=True)


def soft_cross_entropy(logits: Tensor, q: np.ndarray) -> Tensor:
    """Batch mean of -sum_k q_k log softmax(logits)_k."""
    lp = T.log_softmax(logits, axis=1)
    return T.scale(T.sum(T.mul(lp, Tensor(q))), -1.0 / q.shape[0])


def mlm_loss(bb: NewsBackbone, ids, valid, rate, rng, training=True,
             bow_weight: float = 0.0) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Masked-token cross-entropy, plus ``bow_weight`` times the CLS
    bag-of-words loss on the (masked) input."""
    masked, flat, target = mask_tokens(ids, valid, rate, rng)
    states = bb.encoder(bb.embed(masked), _key_bias(valid), rng=rng, training=training)
    lg = bb.mlm_logits_at(states, flat)
    loss = T.cross_entropy(lg, target)
    if bow_weight > 0:
        b, n, d = states.shape
        cls = T.reshape(T.getitem(states, (slice(None), slice(0, 1))), (b, d))
        aux = soft_cross_entropy(bb.bow(cls), bag_of_words(ids, valid, bb.vocab_size))
        loss = T.add(loss, T.scale(aux, bow_weight))
    return loss, lg.data, target


def mlm_pretrain_backbone(token_lists: Sequence[Sequence[int]], vocab_size: int,
                          cfg: TransformerConfig, mlm: MLMConfig,
                          eval_lists: Optional[Sequence[Sequence[int]]] = None,
                          prefix: str = "news.backbone") -> Tuple[ParameterSet, dict]:
    """Train a NewsBackbone with masked-token cross-entropy, then freeze it.

    Returns the frozen parameters and a report with per-epoch losses,
    masked-token accuracy on ``eval_lists`` (train lists when None), the
    majority-token baseline accuracy, and the snapshot hash.
    """
    mlm.validate()
    if len(token_lists) == 0:
        raise ValueError("cannot pre-train on an empty corpus")
    rng = np.random.default_rng(mlm.seed)
    params = ParameterSet()
    bb = NewsBackbone(params, prefix, vocab_size, cfg, rng)
    state = AdamWState(learning_rate=mlm.learning_rate, weight_decay=mlm.weight_decay)
    n = len(token_lists)
    curve = []
    for epoch in range(mlm.epochs):
        order = rng.permutation(n)
        tot, cnt = 0.0, 0
        for s in range(0, n, mlm.batch_size):
            batch = [token_lists[i] for i in order[s:s + mlm.batch_size]]
            ids, valid = pad_batch(batch)
            params.zero_grad()
            loss, _, _ = mlm_loss(bb, ids, valid, mlm.mask_rate, rng, training=True,
                                  bow_weight=mlm.bow_weight)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"masked-token loss diverged at epoch {epoch + 1}")
            T.backward(loss)
            adamw_step(params, state)
            tot += loss.item() * len(batch)
            cnt += len(batch)
        curve.append(tot / cnt)
        log.info("mlm epoch %d loss %.4f", epoch + 1, curve[-1])
    params.freeze()
    acc, base = masked_token_accuracy(bb, eval_lists if eval_lists is not None else token_lists,
                                      mlm.mask_rate, mlm.seed + 1)
    report = {"loss_curve": curve, "masked_token_acc": acc, "majority_baseline_acc": base,
              "backbone_sha256": params.tensor_hash()}
    return params, report


def masked_token_accuracy(bb: NewsBackbone, token_lists, rate: float, seed: int,
                          batch_size: int = 64) -> Tuple[float, float]:
    """(model accuracy, majority-token accuracy) on one fixed random masking."""
    rng = np.random.default_rng(seed)
    hits, total = 0, 0
    targets = []
    with T.no_grad():
        for s in range(0, len(token_lists), batch_size):
            ids, valid = pad_batch(token_lists[s:s + batch_size])
            _, lg, tgt = mlm_loss(bb, ids, valid, rate, rng, training=False)
            hits += int((lg.argmax(axis=1) == tgt).sum())
            total += tgt.size
            targets.append(tgt)
    allt = np.concatenate(targets)
    majority = np.bincount(allt).max() / allt.size
    return 100.0 * hits / total, 100.0 * majority
