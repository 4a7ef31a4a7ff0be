"""On-disk artifacts shared by the commands: the frozen news backbone, the
pre-trained Data Encoder, and the vocabulary they were built with."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Tuple

from .checkpoint import save_checkpoint
from .dataset import DataBundle, load_bundle
from .encoders import MLMConfig, mlm_pretrain_backbone
from .news import make_doc, read_news_jsonl
from .training import (MissingArtifactError, PretrainConfig, Pretrained, data_zero_shot_accuracy,
                       load_pretrained, pretrain_data_encoder)

log = logging.getLogger(__name__)

BACKBONE_FILE = "news_backbone.ckpt"
DATA_FILE = "data_encoder.ckpt"
VOCAB_FILE = "vocab.txt"
REPORT_FILE = "pretrain_report.json"


def require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(str(p))
    return p


def headline_corpus(data_dir, bundle: DataBundle):
    """Token ids of every headline dated before the dev boundary (paired
    with a labelled window or not); dev/test text is never seen."""
    recs = read_news_jsonl(require(Path(data_dir) / "news.jsonl"))
    cut = bundle.boundaries[0]
    return [make_doc(r["text"], bundle.vocab).token_ids for r in recs if r["date"] < cut]


def pretrain_artifacts(data_dir, out_dir, news_size, mlm: MLMConfig, pcfg: PretrainConfig,
                       bundle: Optional[DataBundle] = None) -> dict:
    """Masked-token pre-training of the news backbone, MSE pre-training of
    the Data Encoder; both checkpoints plus vocab and a JSON report."""
    data_dir, out = Path(data_dir), Path(out_dir)
    for name in ("trading.csv", "news.jsonl", "dataset.json"):
        require(data_dir / name)
    bundle = bundle if bundle is not None else load_bundle(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    ncfg = news_size.transformer()
    corpus = headline_corpus(data_dir, bundle)
    backbone, mrep = mlm_pretrain_backbone(corpus, len(bundle.vocab), ncfg, mlm)
    save_checkpoint(out / BACKBONE_FILE, backbone,
                    {"kind": "news-backbone", "news_config": ncfg.to_dict(), "mlm_config": vars(mlm),
                     "backbone_sha256": mrep["backbone_sha256"], "vocab_size": len(bundle.vocab)})
    bundle.vocab.save(out / VOCAB_FILE)
    dparams, norm, drep = pretrain_data_encoder(bundle.pretrain, pcfg)
    dcfg = pcfg.transformer()
    save_checkpoint(out / DATA_FILE, dparams,
                    {"kind": "data-encoder", "data_config": dcfg.to_dict(), "pretrain_config": vars(pcfg),
                     "input_norm": norm.to_dict(), "best_epoch": drep["best_epoch"],
                     "best_dev_mse": drep["best_dev_mse"]})
    report = {"mlm": {"corpus_size": len(corpus), **mrep},
              "data": {**drep, "zero_shot_test_acc": data_zero_shot_accuracy(
                  dparams, dcfg, norm, bundle.splits["test"])},
              "counts": bundle.report["counts"], "pretrain_counts": bundle.report["pretrain_counts"]}
    (out / REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def load_artifacts(pre_dir) -> Pretrained:
    d = Path(pre_dir)
    return load_pretrained(require(d / BACKBONE_FILE), require(d / DATA_FILE), require(d / VOCAB_FILE))


def load_data(data_dir, pre: Pretrained) -> DataBundle:
    """Bundle tokenised with the pre-training vocabulary."""
    return load_bundle(data_dir, vocab=pre.vocab, with_pretrain=False)


def artifacts(data_dir, pre_dir) -> Tuple[Pretrained, DataBundle]:
    pre = load_artifacts(pre_dir)
    return pre, load_data(data_dir, pre)
