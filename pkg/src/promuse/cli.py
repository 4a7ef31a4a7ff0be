"""``promuse`` command line: synth, pretrain, train, eval, ablate, baseline,
inspect.

Exit codes: 0 ok, 2 usage or config error, 3 missing artifact, 4 numeric
failure (NaN/inf loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as C
from .ablation import PRESETS, grid, preset, run_grid
from .baselines import BASELINES, run_baselines
from .checkpoint import CheckpointError, load_checkpoint
from .dataset import load_bundle
from .inference import accuracy
from .news import Vocab
from .pipeline import VOCAB_FILE, artifacts, pretrain_artifacts, require
from .synth import default_paper_sizing, generate
from .training import MissingArtifactError, evaluate, load_model, predict_labels, predict_split, train

log = logging.getLogger("promuse")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
RESOLVED = "resolved.cfg"

# paper-scale split sizes the --paper-sizing option aims for
PAPER_COUNTS = {"train": 8483, "dev": 687, "test": 938}
PAPER_PRETRAIN_COUNTS = {"train": 74950, "dev": 2214, "test": 4072}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _settings(args, extra: Optional[List[str]] = None) -> C.Settings:
    overrides = list(args.set or []) + list(extra or [])
    return C.load(args.config, overrides)


def _seed_overrides(args) -> List[str]:
    if getattr(args, "seed", None) is None:
        return []
    return [f"synth.seed={args.seed}", f"mlm.seed={args.seed}", f"pretrain.seed={args.seed}"]


def _train_overrides(args) -> List[str]:
    out = []
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            out.append(f"train.{key}={v}")
    if getattr(args, "seeds", None):
        out.append(f"train.seeds={args.seeds}")
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    s = _settings(args, _seed_overrides(args))
    cfg = default_paper_sizing(s.synth) if args.paper_sizing else s.synth
    s.synth = cfg
    out = Path(args.out)
    generate(cfg, out)
    C.dump(s, out / RESOLVED)
    bundle = load_bundle(out)
    report = {"counts": bundle.report["counts"], "pretrain_counts": bundle.report["pretrain_counts"],
              "windows": bundle.report["windows"], "paired": bundle.report["paired"],
              "kept": bundle.report["kept"]}
    if args.paper_sizing:
        report["targets"] = {"counts": PAPER_COUNTS, "pretrain_counts": PAPER_PRETRAIN_COUNTS}
        report["relative_error"] = {
            key: {k: report[key][k] / tgt[k] - 1.0 for k in tgt}
            for key, tgt in (("counts", PAPER_COUNTS), ("pretrain_counts", PAPER_PRETRAIN_COUNTS))}
    _write_json(out / "counts.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    s = _settings(args, _seed_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.dump(s, out / RESOLVED)
    rep = pretrain_artifacts(args.data, out, s.news, s.mlm, s.pretrain)
    print(json.dumps({"masked_token_acc": rep["mlm"]["masked_token_acc"],
                      "majority_baseline_acc": rep["mlm"]["majority_baseline_acc"],
                      "data_best_dev_mse": rep["data"]["best_dev_mse"],
                      "data_zero_shot_test_acc": rep["data"]["zero_shot_test_acc"]}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    s = _settings(args, _train_overrides(args))
    cfg = preset(args.preset, s.train) if args.preset else s.train.validate()
    s.train = cfg
    pre, bundle = artifacts(args.data, args.pretrained)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.dump(s, out / RESOLVED)
    summary = train(cfg, bundle, pre, out)
    print(json.dumps({"config_name": cfg.name, "test_acc_mean": summary["test_acc_mean"],
                      "test_acc_std": summary["test_acc_std"], "test_accs": summary["test_accs"]},
                     sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = require(args.model)
    build_news = not args.data_only
    build_data = not args.news_only
    vocab = model_vocab(ckpt)
    model, _ = load_model(ckpt, build_news=build_news, build_data=build_data, vocab=vocab)
    bundle = load_bundle(require(args.data), vocab=vocab, with_pretrain=False)
    split = bundle.splits[args.split]
    dists = predict_split(model, split, model.cfg.eval_batch_size)
    if args.news_only or args.data_only:
        heads = {"news": build_news, "data": build_data, "fusion": False}
        acc = accuracy(predict_labels(dists, heads), split.labels)
    else:
        heads = dict(model.cfg.head_mask)
        acc = evaluate(model, split, calibration_split=bundle.splits["dev"])
    used = sorted(k for k, v in heads.items() if v and k in dists)
    result = {"checkpoint": str(ckpt), "split": args.split, "n": len(split), "accuracy": acc,
              "heads": used, "distributions_valid": all(valid_distribution(dists[k]) for k in used),
              "towers_built": {"news": model.news is not None, "data": model.data is not None}}
    if args.out:
        _write_json(Path(args.out), result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def valid_distribution(p: np.ndarray) -> bool:
    return bool(p.ndim == 2 and p.shape[1] == 2 and np.all(np.isfinite(p)) and np.all(p >= 0)
                and np.allclose(p.sum(axis=1), 1.0, atol=1e-9))


def model_vocab(ckpt: Path) -> Vocab:
    return Vocab.load(require(Path(ckpt).parent / VOCAB_FILE))


def cmd_ablate(args) -> int:
    s = _settings(args, _train_overrides(args))
    configs = grid(args.grid, s.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.dump(s, out / RESOLVED)
    pre, bundle = artifacts(args.data, args.pretrained)
    rows = run_grid(configs, bundle, pre, out, dry_run=args.dry_run)
    for r in rows:
        acc = "" if "mean" not in r else f" {r['mean']:.2f} +- {r['std']:.2f}"
        print(f"{r['name']:24s} losses {r['losses']} heads {r['heads']} audit {r['audit']}{acc}")
    bad = [r["name"] for r in rows if r["audit"] == "mismatch"]
    if bad:
        print(f"gradient-flow audit mismatch: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_baseline(args) -> int:
    s = _settings(args)
    bundle = load_bundle(require(args.data), with_pretrain=False)
    res = run_baselines(bundle.splits[args.split], args.which, s.train.seeds)
    res = {"split": args.split, "n": len(bundle.splits[args.split]), **res}
    if args.out:
        _write_json(Path(args.out), res)
        C.dump(s, Path(args.out).with_suffix(".cfg"))
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    p = Path(args.path)
    if p.is_dir():
        for name in ("summary.json", "metrics.json", "results.json", "counts.json", "pretrain_report.json"):
            if (p / name).exists():
                print((p / name).read_text(), end="")
                return EXIT_OK
        raise MissingArtifactError(str(p / "summary.json"))
    require(p)
    params, man = load_checkpoint(p)
    info = {"manifest": man, "tensors": len(list(params.items())), "frozen_sha256": params.frozen_hash(),
            "sha256": params.tensor_hash()}
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promuse", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one value")

    def training(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seeds", help="comma-separated seeds")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--paper-sizing", action="store_true", help="size splits like the reference corpus")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="pre-train the news backbone and the Data Encoder")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="train one configuration over its seeds")
    common(sp)
    training(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=sorted(PRESETS), help="named configuration (else [train] as given)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of a trained checkpoint")
    sp.add_argument("--model", required=True, help="seed directory's model.ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "dev", "test"))
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--news-only", action="store_true", help="never build the Data Encoder")
    g.add_argument("--data-only", action="store_true", help="never build the News Encoder")
    sp.add_argument("--out", help="write the result JSON here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run a named grid of configurations")
    common(sp)
    training(sp)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dry-run", action="store_true", help="audit gradient flow only, no training")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("baseline", help="Random and EMA baselines")
    common(sp)
    sp.add_argument("--which", default="all", choices=BASELINES + ("all",))
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "dev", "test"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("inspect", help="print a checkpoint manifest or a run summary")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MissingArtifactError, FileNotFoundError) as e:
        print(f"missing artifact: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (C.ConfigError, CheckpointError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
