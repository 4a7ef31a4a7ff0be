"""Joint objective, model assembly, pre-training and main training loops,
dev-set checkpoint selection, and evaluation."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DataBundle, PretrainSplit, Split, iterate_batches, news_batch
from .encoders import (PARADIGMS, PROMPT_LEN, DataEncoder, InputNorm, NewsEncoder, data_config,
                       news_config, pretrain_loss)
from .fusion import (D_ALIGN, FUSION_VARIANTS, TEMPERATURE, AttentionFusion, DataPromptInjector,
                     LinearFusion, Projector, TransformerFusion, alignment_loss, similarity_matrix)
from .inference import (EnsembleCalibration, PredictionTriple, accuracy, argmax_down_ties,
                        ensemble_variant, missing_modality_predict)
from .nn import HEAD_STD, Linear, TransformerConfig
from .news import Vocab
from .optim import AdamWState, adamw_step, exp_lr_decay
from .params import ParameterSet
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSSES = ("news", "data", "fusion", "align")
HEADS = ("news", "data", "fusion")
MODALITIES = ("both", "news", "data")
DATA_INITS = ("pretrained", "scratch", "zero-shot")
NEWS_INITS = ("pretrained", "scratch")
ENSEMBLES = ("average", "learnable", "predicted", "normalized")


class DivergenceError(FloatingPointError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class LossWeights:
    news: float = 1.0
    data: float = 1.0
    fusion: float = 1.0
    align: float = 0.1

    def __post_init__(self):
        for k in LOSSES:
            if not getattr(self, k) >= 0:
                raise ValueError(f"loss weight {k} must be >= 0")


def total_loss(components: Dict[str, object], weights: LossWeights,
               enabled: Optional[Dict[str, bool]] = None):
    """Weighted sum of the enabled batch-mean component losses.

    Works on floats or Tensors. Components that are disabled (or missing)
    do not enter the sum; an empty selection is an error.
    """
    enabled = enabled if enabled is not None else {k: True for k in LOSSES}
    terms = [(getattr(weights, k), components[k]) for k in LOSSES
             if enabled.get(k, False) and components.get(k) is not None]
    if not terms:
        raise ValueError("total_loss: every loss component is disabled")
    if not any(isinstance(c, Tensor) for _, c in terms):
        return float(sum(w * float(c) for w, c in terms))
    out = None
    for w, c in terms:
        c = c if isinstance(c, Tensor) else Tensor(c)
        term = T.scale(c, w)
        out = term if out is None else T.add(out, term)
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    name: str = "promuse"
    epochs: int = 40
    batch_size: int = 32
    seeds: Tuple[int, ...] = (0, 1, 2, 3)
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    lr_decay: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    losses: Tuple[bool, bool, bool, bool] = (True, True, True, True)
    heads: Tuple[bool, bool, bool] = (True, True, True)
    modalities: str = "both"
    paradigm: str = "prompt"
    data_init: str = "pretrained"
    news_init: str = "pretrained"
    fusion: str = "linear"
    fusion_layers: int = 1
    fusion_width: int = 0  # transformer-fusion width; 0 means d_align
    ensemble: str = "average"
    tau: float = TEMPERATURE
    d_align: int = D_ALIGN
    prompt_len: int = PROMPT_LEN
    data_fraction: float = 1.0
    eval_batch_size: int = 256

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.losses = tuple(bool(x) for x in self.losses)
        self.heads = tuple(bool(x) for x in self.heads)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def validate(self) -> "RunConfig":
        if len(self.losses) != 4 or len(self.heads) != 3:
            raise ValueError("losses mask has 4 entries (news, data, fusion, align); heads has 3")
        if self.modalities not in MODALITIES:
            raise ValueError(f"modalities must be one of {MODALITIES}")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.data_init not in DATA_INITS:
            raise ValueError(f"data_init must be one of {DATA_INITS}")
        if self.news_init not in NEWS_INITS:
            raise ValueError(f"news_init must be one of {NEWS_INITS}")
        if self.news_init == "scratch" and self.paradigm != "fine-tune":
            raise ValueError("a news encoder trained from scratch needs paradigm fine-tune")
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"fusion must be one of {FUSION_VARIANTS}")
        if self.ensemble not in ENSEMBLES:
            raise ValueError(f"ensemble must be one of {ENSEMBLES}")
        if not any(self.heads):
            raise ValueError("at least one prediction head must be enabled")
        if not any(self.losses) and not self.untrained:
            raise ValueError("at least one loss must be enabled")
        if self.modalities != "both":
            other = {"news": (1, 2, 3), "data": (0, 2, 3)}[self.modalities]
            if any(self.losses[i] for i in other) or any(self.heads[i] for i in other if i < 3):
                raise ValueError(f"{self.modalities}-only run can use only its own loss/head")
        if self.epochs < 0 or self.batch_size < 1 or not self.seeds:
            raise ValueError("epochs >= 0, batch_size >= 1 and at least one seed required")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.fusion_width < 0 or self.fusion_layers < 1 or self.d_align < 1:
            raise ValueError("fusion_width >= 0, fusion_layers >= 1 and d_align >= 1 required")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        return self

    @property
    def untrained(self) -> bool:
        """Zero-shot settings: nothing is tuned, evaluation only."""
        news_fixed = self.paradigm in ("hard-prompt", "zero-shot")
        data_fixed = self.data_init == "zero-shot"
        if self.modalities == "news":
            return news_fixed
        if self.modalities == "data":
            return data_fixed
        return news_fixed and data_fixed

    @property
    def loss_mask(self) -> Dict[str, bool]:
        return dict(zip(LOSSES, self.losses))

    @property
    def head_mask(self) -> Dict[str, bool]:
        return dict(zip(HEADS, self.heads))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["losses"] = list(self.losses)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d).validate()


def unimodal_config(kind: str, base: Optional[RunConfig] = None, **kw) -> RunConfig:
    """news-only or data-only model with its single loss and head."""
    base = base or RunConfig()
    i = {"news": 0, "data": 1}[kind]
    losses = tuple(j == i for j in range(4))
    heads = tuple(j == i for j in range(3))
    return dataclasses.replace(base, name=kw.pop("name", f"{kind}-only"), modalities=kind,
                               losses=losses, heads=heads, **kw).validate()


# ---------------------------------------------------------------------------
# pre-trained artifacts
# ---------------------------------------------------------------------------

@dataclass
class Pretrained:
    vocab: Vocab
    news_cfg: TransformerConfig
    backbone: Optional[ParameterSet]
    data_cfg: TransformerConfig
    data_params: Optional[ParameterSet]
    norm: InputNorm
    backbone_sha256: str = ""


def load_pretrained(news_ckpt, data_ckpt, vocab_path) -> Pretrained:
    for p in (news_ckpt, data_ckpt, vocab_path):
        if not Path(p).exists():
            raise MissingArtifactError(str(p))
    bb, bman = load_checkpoint(news_ckpt)
    dp, dman = load_checkpoint(data_ckpt)
    return Pretrained(Vocab.load(vocab_path), TransformerConfig(**bman["news_config"]), bb,
                      TransformerConfig(**dman["data_config"]), dp, InputNorm.from_dict(dman["input_norm"]),
                      bman.get("backbone_sha256", ""))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Mixer:
    """Two-head trained ensembles: a learnable scalar weight (init 1) or
    weights predicted from [h_news; h_data]."""

    def __init__(self, params: ParameterSet, kind: str, d_news: int, d_data: int, rng):
        self.kind = kind
        if kind == "learnable":
            self.w = params.add("mix.w", np.ones((1, 1)))
        else:
            self.head = Linear(params, "mix.head", d_news + d_data, 2, rng, std=HEAD_STD)

    def weights(self, h_news: Tensor, h_data: Tensor) -> Tensor:
        b = h_news.shape[0]
        if self.kind == "learnable":
            s = T.sigmoid(self.w)
            one = Tensor(np.ones((b, 1)))
            s_b = T.matmul(one, s)
            return T.concat([s_b, T.add_const(T.scale(s_b, -1.0), 1.0)], axis=1)
        return T.softmax(self.head(T.concat([h_news, h_data], axis=1)), axis=1)

    def __call__(self, p_news: Tensor, p_data: Tensor, h_news: Tensor, h_data: Tensor) -> Tensor:
        w = self.weights(h_news, h_data)
        ones = Tensor(np.ones((1, 2)))
        w1 = T.matmul(T.getitem(w, (slice(None), slice(0, 1))), ones)
        w2 = T.matmul(T.getitem(w, (slice(None), slice(1, 2))), ones)
        return T.add(T.mul(w1, p_news), T.mul(w2, p_data))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _nll_of_probs(p: Tensor, y: np.ndarray) -> Tensor:
    onehot = np.zeros(p.shape)
    onehot[np.arange(len(y)), y] = 1.0
    return T.scale(T.sum(T.mul(T.log(p), Tensor(onehot))), -1.0 / len(y))


class ProMUSEModel:
    """Both towers, shared-space projector, fusion head (or two-head mixer).

    Towers can be left out (``build_news``/``build_data``) for unimodal runs
    and missing-modality evaluation; the fusion side only exists with both.
    """

    def __init__(self, cfg: RunConfig, vocab: Vocab, news_cfg: TransformerConfig,
                 data_cfg: TransformerConfig, norm: InputNorm, rng: np.random.Generator,
                 build_news: bool = True, build_data: bool = True):
        self.cfg = cfg
        self.params = ParameterSet()
        p = self.params
        self.news = self.data = self.proj = self.fusion = self.injector = self.mixer = None
        if build_news:
            self.news = NewsEncoder(p, len(vocab), news_cfg, rng, cfg.paradigm, cfg.prompt_len)
            if self.news.scores_with_template:
                self.news.bind_vocab(vocab)
        if build_data:
            self.data = DataEncoder(p, data_cfg, rng, norm=norm)
            if cfg.data_init == "zero-shot":
                p.freeze("data.")
        if build_news and build_data:
            if uses_projector(cfg):
                self.proj = Projector(p, news_cfg.d, data_cfg.d, rng, cfg.d_align)
            if cfg.ensemble in ("learnable", "predicted"):
                self.mixer = Mixer(p, cfg.ensemble, news_cfg.d, data_cfg.d, rng)
            elif cfg.fusion == "linear":
                self.fusion = LinearFusion(p, cfg.d_align, rng)
            elif cfg.fusion == "attention":
                self.fusion = AttentionFusion(p, cfg.d_align, rng)
            elif cfg.fusion == "transformer":
                self.fusion = TransformerFusion(p, news_cfg.d, data_cfg.d, rng,
                                                cfg.fusion_width or cfg.d_align,
                                                cfg.fusion_layers, dropout=news_cfg.dropout)
            else:
                self.injector = DataPromptInjector(p, data_cfg.d, news_cfg.d, news_cfg.n_layers, rng,
                                                   every_layer=cfg.fusion == "inject-every")
                self.fusion = Linear(p, "fusion.out", news_cfg.d, 2, rng, std=HEAD_STD)

    # -- forward ----------------------------------------------------------
    def forward(self, ids: Optional[np.ndarray], mask: Optional[np.ndarray],
                grids: Optional[np.ndarray], v_bar: Optional[np.ndarray] = None,
                token_lists=None, rng=None, training: bool = False) -> Dict[str, object]:
        out: Dict[str, object] = {}
        full = self.cfg.fusion == "transformer" and self.fusion is not None
        news_states = data_states = None
        if self.news is not None:
            if self.news.scores_with_template:
                p, h = self.news.template_distribution(token_lists)
                out["p_news"], out["h_news"] = p, Tensor(h)
            else:
                h = self.news.forward(ids, mask, rng=rng, training=training, full_states=full)
                if full:
                    news_states = h
                    h = T.reshape(T.getitem(h, (slice(None), slice(0, 1))), (h.shape[0], h.shape[2]))
                out["h_news"] = h
                out["logits_news"] = self.news.logits(h)
        if self.data is not None:
            h = self.data.forward(grids, rng=rng, training=training, full_states=full)
            if full:
                data_states = h
                h = T.reshape(T.getitem(h, (slice(None), slice(0, 1))), (h.shape[0], h.shape[2]))
            out["h_data"] = h
            if self.cfg.data_init == "zero-shot":
                fc = self.data.forecast(h).data
                diff = fc - np.log(np.asarray(v_bar))
                out["p_data"] = np.stack([1.0 / (1.0 + np.exp(diff)), 1.0 / (1.0 + np.exp(-diff))], axis=1)
            else:
                out["logits_data"] = self.data.logits(h)
        if self.proj is not None:
            out["v_news"], out["v_data"] = self.proj(out["h_news"], out["h_data"])
        if self.news is not None and self.data is not None:
            if self.mixer is not None:
                pn = self._probs_tensor(out, "news")
                pd = self._probs_tensor(out, "data")
                out["p_mix"] = self.mixer(pn, pd, out["h_news"], out["h_data"])
            elif isinstance(self.fusion, TransformerFusion):
                out["logits_fusion"] = self.fusion(news_states, mask, data_states, rng, training)
            elif self.injector is not None:
                extra = self.injector(out["h_data"])
                h_inj = self.news.forward(ids, mask, rng=rng, training=training, extra_prefixes=extra)
                out["logits_fusion"] = self.fusion(h_inj)
            else:
                out["logits_fusion"] = self.fusion(out["v_news"], out["v_data"])
        return out

    @staticmethod
    def _probs_tensor(out, kind) -> Tensor:
        if f"logits_{kind}" in out:
            return T.softmax(out[f"logits_{kind}"], axis=1)
        return Tensor(out[f"p_{kind}"])

    def losses(self, out: Dict[str, object], y: np.ndarray) -> Dict[str, Optional[Tensor]]:
        mask = self.cfg.loss_mask
        comps: Dict[str, Optional[Tensor]] = {k: None for k in LOSSES}
        if mask["news"] and "logits_news" in out:
            comps["news"] = T.cross_entropy(out["logits_news"], y)
        if mask["data"] and "logits_data" in out:
            comps["data"] = T.cross_entropy(out["logits_data"], y)
        if mask["fusion"]:
            if "logits_fusion" in out:
                comps["fusion"] = T.cross_entropy(out["logits_fusion"], y)
            elif "p_mix" in out:
                comps["fusion"] = _nll_of_probs(out["p_mix"], y)
        if mask["align"] and "v_news" in out:
            comps["align"] = alignment_loss(similarity_matrix(out["v_news"], out["v_data"]), self.cfg.tau)
        return comps

    def distributions(self, out: Dict[str, object]) -> Dict[str, np.ndarray]:
        """Numpy class distributions of every head present in ``out``."""
        d = {}
        for k in ("news", "data", "fusion"):
            if f"logits_{k}" in out:
                d[k] = _softmax_np(out[f"logits_{k}"].data)
            elif f"p_{k}" in out:
                d[k] = np.asarray(out[f"p_{k}"])
        if "p_mix" in out:
            d["fusion"] = out["p_mix"].data
        return d


# ---------------------------------------------------------------------------
# parameter groups and gradient-flow audit
# ---------------------------------------------------------------------------

def parameter_groups(model: ProMUSEModel) -> Dict[str, List[str]]:
    groups: Dict[str, List[str]] = {"news_head": [], "news_tunable": [], "data_trunk": [],
                                    "data_head": [], "data_pre": [], "projector": [], "fusion": []}
    for name in model.params.trainable_names():
        if name.startswith("news.head."):
            groups["news_head"].append(name)
        elif name.startswith("news."):
            groups["news_tunable"].append(name)
        elif name.startswith("data.head."):
            groups["data_head"].append(name)
        elif name.startswith("data.pre."):
            groups["data_pre"].append(name)
        elif name.startswith("data."):
            groups["data_trunk"].append(name)
        elif name.startswith("proj."):
            groups["projector"].append(name)
        else:
            groups["fusion"].append(name)
    return groups


def uses_projector(cfg: RunConfig) -> bool:
    """The shared-space projection is read by the alignment loss and by the
    linear / attention fusion heads; the other variants never touch it."""
    mixer = cfg.ensemble in ("learnable", "predicted")
    return cfg.losses[3] or (not mixer and cfg.fusion in ("linear", "attention"))


def expected_gradient_groups(cfg: RunConfig) -> Dict[str, bool]:
    """Which trainable groups a loss mask should reach. Linear-Pre is only
    trained during pre-training, so it never receives a gradient here. A
    trained two-head mixer reads both unimodal heads, so the fusion loss
    reaches them too."""
    m = cfg.loss_mask
    shared = m["fusion"] or m["align"]
    mixer = cfg.ensemble in ("learnable", "predicted")
    fusion_reads_v = not mixer and cfg.fusion in ("linear", "attention")
    return {"news_head": m["news"] or (mixer and m["fusion"]),
            "news_tunable": m["news"] or shared,
            "data_trunk": m["data"] or shared,
            "data_head": m["data"] or (mixer and m["fusion"]), "data_pre": False,
            "projector": m["align"] or (m["fusion"] and fusion_reads_v), "fusion": m["fusion"]}


def gradient_flow(model: ProMUSEModel, split: Split, idx, rng=None, jitter: float = 0.01,
                  seed: int = 0) -> Dict[str, bool]:
    """One backward pass of the masked objective; per group, did any
    parameter receive a nonzero gradient?

    Zero-initialised heads would block some paths at step 0 by accident
    rather than by structure, so the pass runs at a copy of the trainable
    parameters with N(0, jitter) added; the model is restored afterwards.
    """
    saved = model.params.snapshot()
    if jitter:
        g = np.random.default_rng(seed)
        for n in model.params.trainable_names():
            t = model.params[n]
            t.data[...] = t.data + jitter * g.normal(size=t.shape)
    try:
        return _flow(model, split, idx, rng)
    finally:
        model.params.restore(saved)


def _flow(model: ProMUSEModel, split: Split, idx, rng) -> Dict[str, bool]:
    model.params.zero_grad()
    ids, mask = news_batch(split, idx)
    out = model.forward(ids, mask, split.grids[idx], split.v_bar[idx],
                        [split.token_ids[i] for i in idx], rng=rng, training=False)
    loss = total_loss(model.losses(out, split.labels[idx]), model.cfg.weights, model.cfg.loss_mask)
    T.backward(loss)
    flow = {}
    for g, names in parameter_groups(model).items():
        if names:
            flow[g] = any(np.any(model.params[n].grad != 0) for n in names)
    model.params.zero_grad()
    return flow


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_split(model: ProMUSEModel, split: Split, batch_size: int = 256) -> Dict[str, np.ndarray]:
    parts: Dict[str, List[np.ndarray]] = {}
    with T.no_grad():
        for idx in iterate_batches(len(split), batch_size):
            ids = mask = None
            if model.news is not None:
                ids, mask = news_batch(split, idx)
            out = model.forward(ids, mask, split.grids[idx] if model.data is not None else None,
                                split.v_bar[idx], [split.token_ids[i] for i in idx])
            for k, v in model.distributions(out).items():
                parts.setdefault(k, []).append(v)
            for k in ("h_news", "h_data"):
                if k in out:
                    parts.setdefault(k, []).append(out[k].data)
    return {k: np.concatenate(v) for k, v in parts.items()}


def predict_labels(dists: Dict[str, np.ndarray], heads: Dict[str, bool]) -> np.ndarray:
    triple = PredictionTriple(dists.get("news") if heads.get("news") else None,
                              dists.get("data") if heads.get("data") else None,
                              dists.get("fusion") if heads.get("fusion") else None)
    return missing_modality_predict(triple)


def evaluate(model: ProMUSEModel, split: Split, heads: Optional[Dict[str, bool]] = None,
             calibration_split: Optional[Split] = None) -> float:
    """Accuracy on ``split``. The "normalized" two-head ensemble fits its
    per-head moments on ``calibration_split`` (the dev set)."""
    heads = heads if heads is not None else model.cfg.head_mask
    dists = predict_split(model, split, model.cfg.eval_batch_size)
    if model.cfg.ensemble == "normalized" and heads.get("news") and heads.get("data"):
        if calibration_split is None:
            raise ValueError("normalized ensemble needs the dev split for calibration")
        ref = dists if calibration_split is split else predict_split(model, calibration_split,
                                                                      model.cfg.eval_batch_size)
        cal = EnsembleCalibration.fit(ref["news"], ref["data"])
        pred = argmax_down_ties(ensemble_variant("normalized", dists["news"], dists["data"],
                                                 calibration=cal))
        return accuracy(pred, split.labels)
    return accuracy(predict_labels(dists, heads), split.labels)


# ---------------------------------------------------------------------------
# main training
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    metrics: dict
    model: ProMUSEModel


def build_model(cfg: RunConfig, pre: Pretrained, seed: int, build_news: Optional[bool] = None,
                build_data: Optional[bool] = None) -> ProMUSEModel:
    rng = np.random.default_rng([seed, 0])
    bn = cfg.modalities in ("both", "news") if build_news is None else build_news
    bd = cfg.modalities in ("both", "data") if build_data is None else build_data
    model = ProMUSEModel(cfg, pre.vocab, pre.news_cfg, pre.data_cfg, pre.norm, rng, bn, bd)
    if bn and cfg.news_init == "pretrained":
        if pre.backbone is None:
            raise MissingArtifactError("news backbone checkpoint")
        _copy(pre.backbone, model.params)
    if bd and cfg.data_init != "scratch":
        if pre.data_params is None:
            raise MissingArtifactError("data encoder checkpoint")
        _copy(pre.data_params, model.params, skip="data.head.")
    return model


def _copy(src: ParameterSet, dst: ParameterSet, skip: Optional[str] = None) -> None:
    for name, t in src.items():
        if skip is not None and name.startswith(skip):
            continue
        if name in dst:
            if dst[name].shape != t.shape:
                raise ValueError(f"pre-trained tensor {name} has shape {t.shape}, model expects {dst[name].shape}")
            dst[name].data[...] = t.data


def _subsample(split: Split, fraction: float, seed: int) -> Split:
    if fraction >= 1.0:
        return split
    n = max(1, int(round(len(split) * fraction)))
    idx = np.sort(np.random.default_rng([seed, 1]).permutation(len(split))[:n])
    return split.subset(idx)


def train_run(cfg: RunConfig, bundle: DataBundle, pre: Pretrained, seed: int,
              out_dir: Optional[Path] = None) -> RunResult:
    """Train one seed; select the epoch with the best dev accuracy (first
    on ties), report its test accuracy, and optionally write a checkpoint
    plus metrics JSON under ``out_dir``."""
    cfg.validate()
    model = build_model(cfg, pre, seed)
    params = model.params
    frozen_before = params.frozen_hash()
    backbone_names = [n for n in params if n.startswith("news.backbone.")]
    backbone_before = params.tensor_hash(backbone_names) if backbone_names else ""
    train = _subsample(bundle.splits["train"], cfg.data_fraction, seed)
    dev, test = bundle.splits["dev"], bundle.splits["test"]
    shuffle_rng = np.random.default_rng([seed, 2])
    drop_rng = np.random.default_rng([seed, 3])
    state = AdamWState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    curve = []
    epochs = 0 if cfg.untrained else cfg.epochs
    best = (-1.0, 0, None)
    if epochs == 0:
        best = (evaluate(model, dev, calibration_split=dev), 0, None)
        curve.append({"epoch": 0, "train_loss": None, "dev_acc": best[0]})
    trainable = params.trainable_names()
    for epoch in range(1, epochs + 1):
        tot, cnt, hits = 0.0, 0, 0
        comp_sums: Dict[str, float] = {}
        for idx in iterate_batches(len(train), cfg.batch_size, shuffle_rng):
            params.zero_grad()
            ids = mask = None
            if model.news is not None:
                ids, mask = news_batch(train, idx)
            y = train.labels[idx]
            out = model.forward(ids, mask, train.grids[idx] if model.data is not None else None,
                                train.v_bar[idx], [train.token_ids[i] for i in idx],
                                rng=drop_rng, training=True)
            comps = model.losses(out, y)
            for k, c in comps.items():
                if c is not None:
                    comp_sums[k] = comp_sums.get(k, 0.0) + float(c.item()) * len(idx)
            loss = total_loss(comps, cfg.weights, cfg.loss_mask)
            lv = float(loss.item()) if isinstance(loss, Tensor) else float(loss)
            if not math.isfinite(lv):
                raise DivergenceError(f"{cfg.name} seed {seed}: loss is {lv} at epoch {epoch}")
            if isinstance(loss, Tensor) and loss.node is not None:
                T.backward(loss)
                adamw_step(params, state)
            tot += lv * len(idx)
            cnt += len(idx)
            hits += int((predict_labels(model.distributions(out), cfg.head_mask) == y).sum())
        if cfg.lr_decay != 1.0:
            exp_lr_decay(state, cfg.lr_decay)
        dev_acc = evaluate(model, dev, calibration_split=dev)
        curve.append({"epoch": epoch, "train_loss": tot / cnt, "train_acc": 100.0 * hits / cnt,
                      "train_components": {k: v / cnt for k, v in sorted(comp_sums.items())},
                      "dev_acc": dev_acc})
        log.info("%s seed %d epoch %d loss %.4f dev %.2f", cfg.name, seed, epoch, tot / cnt, dev_acc)
        if dev_acc > best[0]:
            best = (dev_acc, epoch, {n: params[n].data.copy() for n in trainable})
    if best[2] is not None:
        params.restore(best[2])
    test_acc = evaluate(model, test, calibration_split=dev)
    frozen_after = params.frozen_hash()
    if frozen_after != frozen_before:
        raise RuntimeError("frozen parameters changed during training")
    metrics = {"config_name": cfg.name, "seed": seed, "epoch_curves": curve,
               "best_epoch": best[1], "best_dev_acc": best[0], "test_acc": test_acc,
               "frozen_sha256": frozen_after,
               "backbone_sha256_before": backbone_before,
               "backbone_sha256_after": params.tensor_hash(backbone_names) if backbone_names else "",
               "trainable": trainable}
    if out_dir is not None:
        write_run(model, cfg, pre, bundle, seed, metrics, Path(out_dir))
    return RunResult(metrics, model)


def run_manifest(model: ProMUSEModel, cfg: RunConfig, pre: Pretrained, bundle: Optional[DataBundle],
                 seed: int) -> dict:
    return {"kind": "promuse-model", "run_config": cfg.to_dict(), "seed": seed,
            "news_config": pre.news_cfg.to_dict(), "data_config": pre.data_cfg.to_dict(),
            "input_norm": pre.norm.to_dict(),
            "split_sha256": bundle.split_hashes() if bundle is not None else {},
            "frozen_sha256": model.params.frozen_hash(),
            "built": {"news": model.news is not None, "data": model.data is not None}}


def write_run(model, cfg, pre, bundle, seed, metrics, out_dir: Path) -> None:
    d = out_dir / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "model.ckpt", model.params, run_manifest(model, cfg, pre, bundle, seed))
    pre.vocab.save(d / "vocab.txt")
    (d / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def train(cfg: RunConfig, bundle: DataBundle, pre: Pretrained, out_dir=None) -> dict:
    """All seeds; the reported metric is the mean test accuracy."""
    runs = []
    for s in cfg.seeds:
        r = train_run(cfg, bundle, pre, s, Path(out_dir) if out_dir else None)
        runs.append(r.metrics)
    accs = np.array([r["test_acc"] for r in runs])
    summary = {"config_name": cfg.name, "seeds": list(cfg.seeds),
               "test_acc_mean": float(accs.mean()), "test_acc_std": float(accs.std()),
               "test_accs": accs.tolist(), "runs": runs}
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_model(path, build_news: Optional[bool] = None, build_data: Optional[bool] = None,
               vocab: Optional[Vocab] = None) -> Tuple[ProMUSEModel, dict]:
    """Rebuild a trained model from its checkpoint, optionally without one
    tower (that tower is then never constructed)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    params, man = load_checkpoint(path)
    cfg = RunConfig.from_dict(man["run_config"])
    if vocab is None:
        vp = path.parent / "vocab.txt"
        if not vp.exists():
            raise MissingArtifactError(str(vp))
        vocab = Vocab.load(vp)
    built = man.get("built", {})
    bn = built.get("news", True) if build_news is None else build_news
    bd = built.get("data", True) if build_data is None else build_data
    if bn and not built.get("news", True) or bd and not built.get("data", True):
        raise ValueError("checkpoint lacks the requested tower")
    model = ProMUSEModel(cfg, vocab, TransformerConfig(**man["news_config"]),
                         TransformerConfig(**man["data_config"]), InputNorm.from_dict(man["input_norm"]),
                         np.random.default_rng(0), bn, bd)
    _copy(params, model.params)
    return model, man


# ---------------------------------------------------------------------------
# data-encoder pre-training
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    lr_decay: float = 0.95
    seed: int = 0
    n_layers: int = 6
    d: int = 200
    n_heads: int = 4
    dropout: float = 0.1

    def validate(self) -> "PretrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        return self

    def transformer(self) -> TransformerConfig:
        return data_config(self.n_layers, self.d, self.n_heads, dropout=self.dropout)


def mse_eval(enc: DataEncoder, split: PretrainSplit, batch_size: int = 256) -> float:
    tot = 0.0
    with T.no_grad():
        for idx in iterate_batches(len(split), batch_size):
            tot += pretrain_loss(enc, split.grids[idx], split.log_targets[idx]).item() * len(idx)
    return tot / len(split)


def pretrain_data_encoder(pre_splits: Dict[str, PretrainSplit], pcfg: PretrainConfig
                          ) -> Tuple[ParameterSet, InputNorm, dict]:
    """MSE pre-training of the Data Encoder on next first-slot log volume;
    keeps the epoch with the lowest dev MSE."""
    pcfg.validate()
    train, dev = pre_splits["train"], pre_splits["dev"]
    if len(train) == 0 or len(dev) == 0:
        raise ValueError("pre-training needs non-empty train and dev windows")
    norm = InputNorm.fit(train.grids)
    rng = np.random.default_rng([pcfg.seed, 0])
    params = ParameterSet()
    enc = DataEncoder(params, pcfg.transformer(), rng, norm=norm)
    enc.pre.b.data[...] = train.log_targets.mean()
    params.freeze("data.head.")
    shuffle_rng = np.random.default_rng([pcfg.seed, 2])
    drop_rng = np.random.default_rng([pcfg.seed, 3])
    state = AdamWState(learning_rate=pcfg.learning_rate, weight_decay=pcfg.weight_decay)
    mean_mse = float(((train.log_targets - train.log_targets.mean()) ** 2).mean())
    curve = []
    best = (math.inf, 0, None)
    for epoch in range(1, pcfg.epochs + 1):
        tot = 0.0
        for idx in iterate_batches(len(train), pcfg.batch_size, shuffle_rng):
            params.zero_grad()
            loss = pretrain_loss(enc, train.grids[idx], train.log_targets[idx], drop_rng, True)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"pre-training loss is {loss.item()} at epoch {epoch}")
            T.backward(loss)
            adamw_step(params, state)
            tot += loss.item() * len(idx)
        exp_lr_decay(state, pcfg.lr_decay)
        dev_mse = mse_eval(enc, dev)
        curve.append({"epoch": epoch, "train_mse": tot / len(train), "dev_mse": dev_mse})
        log.info("pretrain epoch %d train %.5f dev %.5f", epoch, tot / len(train), dev_mse)
        if dev_mse < best[0]:
            best = (dev_mse, epoch, params.snapshot())
    params.restore(best[2])
    params.unfreeze("data.")
    report = {"curve": curve, "best_epoch": best[1], "best_dev_mse": best[0],
              "train_mse_at_best": mse_eval(enc, train), "mean_predictor_train_mse": mean_mse}
    return params, norm, report


def data_zero_shot_accuracy(params: ParameterSet, cfg: TransformerConfig, norm: InputNorm,
                            split: Split) -> float:
    """Linear-Pre forecast compared with log v_bar: forecast > log v_bar -> 1."""
    enc = DataEncoder(ParameterSet(), cfg, np.random.default_rng(0), norm=norm)
    _copy(params, enc.params)
    with T.no_grad():
        fc = np.concatenate([enc.forecast(enc.forward(split.grids[idx])).data
                             for idx in iterate_batches(len(split), 256)])
    return accuracy((fc > np.log(split.v_bar)).astype(int), split.labels)
