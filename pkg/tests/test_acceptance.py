"""Acceptance criteria 1-9 at their stated tolerances, on the default desk
synthetic dataset. Each test prints one PASS/FAIL line (also repeated in
the terminal summary). Criterion 5 trains 3 configurations x 4 seeds at
the reference hyperparameters and takes several minutes."""
import csv
import hashlib
import json
import math
import time

import numpy as np
import pytest
from conftest import expected_census, report, tiny_run
from test_market import brute_ema, brute_label, brute_mean, brute_sig, random_window, same_score
from test_tensor import OPS

from promuse import cli
from promuse import config as C
from promuse import market as M
from promuse import tensor as T
from promuse.ablation import MASK_ROWS, mask_string, preset
from promuse.baselines import run_baselines
from promuse.checkpoint import load_checkpoint
from promuse.dataset import news_batch
from promuse.fusion import alignment_loss, similarity_matrix
from promuse.encoders import DataEncoder, data_config, pretrain_loss
from promuse.gradcheck import check_gradients
from promuse.news import CLS, N_RESERVED, pad_batch
from promuse.params import ParameterSet
from promuse.pipeline import artifacts, pretrain_artifacts
from promuse.synth import generate
from promuse.training import build_model, load_model, total_loss, train

SEEDS = (0, 1, 2, 3)
UNIMODAL_TOL = 15.0


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv("PROMUSE_SEED", raising=False)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Default synthetic dataset and desk-scale pre-trained artifacts."""
    root = tmp_path_factory.mktemp("desk")
    s = C.load(env={})
    generate(s.synth, root / "data")
    pretrain_artifacts(root / "data", root / "pre", s.news, s.mlm, s.pretrain)
    pre, bundle = artifacts(root / "data", root / "pre")
    return root, s, pre, bundle


@pytest.fixture(scope="module")
def desk_runs(desk):
    """news-only, data-only and ProMUSE over 4 seeds at the reference
    hyperparameters (40 epochs, batch 32, lr 1e-5, wd 1e-3, weights 1/1/1/0.1)."""
    root, s, pre, bundle = desk
    base = s.train
    assert (base.epochs, base.batch_size, base.learning_rate, base.weight_decay) == (40, 32, 1e-5, 1e-3)
    out, times = {}, {}
    for name in ("news-only", "data-only", "promuse"):
        t0 = time.perf_counter()
        out[name] = train(preset(name, base), bundle, pre, root / "runs" / name)
        times[name] = time.perf_counter() - t0
    return out, times


# -- 1 ----------------------------------------------------------------------

def test_criterion_1_gradient_integrity(tiny):
    t0 = time.perf_counter()
    worst = {}
    for name in sorted(OPS):
        rng = np.random.default_rng(len(name))
        for _ in range(20):
            a, b, f = OPS[name](rng)
            worst[name] = max(worst.get(name, 0.0), check_gradients(f, [x for x in (a, b) if x is not None]))
    pre, bundle = tiny
    split = bundle.splits["train"]
    names = ["news.head.w", "news.prompts.reparam.l2.b", "data.head.w", "data.cls", "proj.news.b",
             "proj.data.b", "fusion.b"]
    for comp in ("news", "data", "fusion", "align", "total"):
        for i in range(20):
            model = build_model(tiny_run(), pre, i)
            g = np.random.default_rng(100 + i)
            for n in model.params.trainable_names():
                model.params[n].data[...] += 0.05 * g.normal(size=model.params[n].shape)
            idx = g.choice(len(split), size=4, replace=False)
            ids, mask = news_batch(split, idx)

            def f():
                out = model.forward(ids, mask, split.grids[idx], split.v_bar[idx])
                comps = model.losses(out, split.labels[idx])
                return total_loss(comps, model.cfg.weights) if comp == "total" else comps[comp]
            key = f"L_{comp}"
            worst[key] = max(worst.get(key, 0.0), check_gradients(f, [model.params[n] for n in names]))
    dcfg = data_config(n_layers=1, d=8, n_heads=2, dropout=0.0)
    for i in range(20):
        enc = DataEncoder(ParameterSet(), dcfg, np.random.default_rng(i))
        g = np.random.default_rng(200 + i)
        x, t = g.normal(size=(3, 200, 5)), g.normal(size=3)
        worst["L_MSE"] = max(worst.get("L_MSE", 0.0), check_gradients(
            lambda: pretrain_loss(enc, x, t), [enc.params["data.pre.w"], enc.params["data.cls"]]))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = report(1, max(worst.values()) < 1e-3 and elapsed < 120,
                f"{len(worst)} ops/losses x 20 instances, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------

def test_criterion_2_closed_form_identities():
    rng = np.random.default_rng(0)
    single = alignment_loss(T.Tensor(rng.normal(size=(1, 1)))).item()
    errs = [abs(alignment_loss(T.Tensor(np.full((b, b), c))).item() - 2 * math.log(b))
            for b in (2, 3, 5, 16, 32) for c in (-3.0, 0.0, 0.7)]
    ce = abs(T.cross_entropy(T.Tensor(np.zeros((4, 2))), np.array([0, 1, 0, 1])).item() - math.log(2))
    ok = report(2, single == 0.0 and max(errs) < 1e-9 and ce < 1e-12,
                f"B=1 loss {abs(single)!r}, uniform max err {max(errs):.1e}, CE err {ce:.1e}")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    windows = [random_window(rng, integer=i % 3 == 0) for i in range(1000)]
    agree = 0
    for w in windows:
        agree += (M.compute_label(w) == brute_label(w)
                  and M.mean_first_slot_volume(w) == float(brute_mean(w))
                  and M.ema_baseline(w) == brute_ema(w)
                  and same_score(M.significance_score(w), brute_sig(w)))
    ids_impl = [id(x.window) for x in M.significance_filter([M.label_window(w) for w in windows])]
    ids_brute = [id(w) for w in windows if abs(brute_sig(w)) > 0.5]
    elapsed = time.perf_counter() - t0
    ok = report(3, agree == 1000 and ids_impl == ids_brute and elapsed < 30,
                f"{agree}/1000 windows agree, filter kept {len(ids_impl)} vs {len(ids_brute)}, {elapsed:.1f}s")
    assert ok


# -- 5 (runs shared with 4 and 8) ------------------------------------------

def test_criterion_5_directional_replication(desk, desk_runs):
    root, s, pre, bundle = desk
    runs, times = desk_runs
    mean = {k: v["test_acc_mean"] for k, v in runs.items()}
    base = run_baselines(bundle.splits["test"], "all", SEEDS)
    best_uni = max(mean["news-only"], mean["data-only"])
    margin = mean["promuse"] - best_uni
    floor = min(mean.values())
    total = sum(times.values())
    detail = (f"promuse {mean['promuse']:.2f}, news-only {mean['news-only']:.2f}, data-only "
              f"{mean['data-only']:.2f} (margin {margin:+.2f}, need +2); min learned {floor:.2f} (need 55); "
              f"random {base['random']['mean']:.2f}, EMA {base['ema']['mean']:.2f}; train time {total:.0f}s")
    ok = report(5, margin >= 2.0 and floor >= 55.0 and total < 600, detail)
    assert ok, detail


# -- 4 ----------------------------------------------------------------------

def test_criterion_4_freeze_audit(desk, desk_runs):
    root, s, pre, bundle = desk
    runs, _ = desk_runs
    cfg = preset("promuse", s.train)
    names, count = expected_census(pre, cfg)
    ok, bad = True, []
    for r in runs["promuse"]["runs"]:
        params, _ = load_checkpoint(root / "runs" / "promuse" / f"seed{r['seed']}" / "model.ckpt")
        n_trainable = sum(params[n].data.size for n in params.trainable_names())
        good = (r["backbone_sha256_before"] == r["backbone_sha256_after"] == pre.backbone_sha256
                and set(r["trainable"]) == names and set(params.trainable_names()) == names
                and n_trainable == count and len(r["epoch_curves"]) == 40)
        ok &= good
        if not good:
            bad.append(r["seed"])
    ok = report(4, ok, f"backbone hash unchanged and census {len(names)} tensors / {count} values "
                       f"on {len(runs['promuse']['runs'])} 40-epoch runs; failing seeds {bad}")
    assert ok


# -- 6 ----------------------------------------------------------------------

def test_criterion_6_ablation_harness(desk, tmp_path):
    root = desk[0]
    rc = cli.main(["ablate", "--grid", "table4", "--data", str(root / "data"), "--pretrained",
                   str(root / "pre"), "--out", str(tmp_path), "--dry-run"])
    with open(tmp_path / "results.csv") as f:
        rows = list(csv.DictReader(f))
    expect = {n: (mask_string(preset(n).losses), mask_string(preset(n).heads)) for n in MASK_ROWS}
    masks_ok = {r["name"]: (r["losses"], r["heads"]) for r in rows} == expect
    audits = [r["audit"] for r in rows]
    ok = report(6, rc == 0 and len(rows) == 9 and masks_ok and all(a == "ok" for a in audits),
                f"exit {rc}, {len(rows)} rows, masks {'match' if masks_ok else 'differ'}, "
                f"audits {audits.count('ok')}/9 ok")
    assert ok


# -- 7 ----------------------------------------------------------------------

def _tree(d):
    return {str(p.relative_to(d)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(desk, tmp_path):
    root = desk[0]
    data, pre = str(root / "data"), str(root / "pre")
    quick = ["--set", "mlm.epochs=1", "--set", "pretrain.epochs=1"]
    commands = {
        "synth": lambda o: ["synth", "--out", o, "--seed", "7"],
        "pretrain": lambda o: ["pretrain", "--data", data, "--out", o] + quick,
        "train": lambda o: ["train", "--data", data, "--pretrained", pre, "--out", o, "--epochs", "2",
                            "--seeds", "3"],
        "eval": lambda o: ["eval", "--model", str(root / "runs" / "promuse" / "seed0" / "model.ckpt"),
                           "--data", data, "--out", o + "/eval.json"],
        "baseline": lambda o: ["baseline", "--data", data, "--out", o + "/b.json"],
        "ablate": lambda o: ["ablate", "--grid", "table4", "--data", data, "--pretrained", pre, "--out", o,
                             "--dry-run"],
    }
    same = {}
    for name, make in commands.items():
        trees = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            out.mkdir(parents=True)
            assert cli.main(make(str(out))) == 0, name
            trees.append(_tree(out))
        same[name] = trees[0] == trees[1] and bool(trees[0])
    ok = report(7, all(same.values()), "identical outputs: " + ", ".join(f"{k} {'yes' if v else 'NO'}"
                                                                          for k, v in same.items()))
    assert ok


# -- 8 ----------------------------------------------------------------------

def test_criterion_8_missing_modality(desk, desk_runs, tmp_path, capsys):
    root = desk[0]
    runs, _ = desk_runs
    accs = {"news": [], "data": []}
    valid, built_ok = True, True
    for seed in SEEDS:
        ckpt = str(root / "runs" / "promuse" / f"seed{seed}" / "model.ckpt")
        for flag, kind in (("--news-only", "news"), ("--data-only", "data")):
            out = tmp_path / f"{kind}{seed}.json"
            assert cli.main(["eval", "--model", ckpt, "--data", str(root / "data"), "--out", str(out), flag]) == 0
            res = json.loads(out.read_text())
            accs[kind].append(res["accuracy"])
            valid &= res["distributions_valid"]
            other = "data" if kind == "news" else "news"
            built_ok &= res["towers_built"] == {kind: True, other: False}
    gaps = {k: abs(np.mean(accs[k]) - runs[f"{k}-only"]["test_acc_mean"]) for k in accs}
    ok = report(8, valid and built_ok and max(gaps.values()) <= UNIMODAL_TOL,
                f"news-only eval {np.mean(accs['news']):.2f} vs unimodal {runs['news-only']['test_acc_mean']:.2f}, "
                f"data-only eval {np.mean(accs['data']):.2f} vs {runs['data-only']['test_acc_mean']:.2f} "
                f"(max gap {max(gaps.values()):.2f} <= {UNIMODAL_TOL}); disabled tower never built: {built_ok}")
    assert ok


# -- 9 ----------------------------------------------------------------------

def test_criterion_9_checkpoint_round_trip(desk, desk_runs):
    root, s, pre, bundle = desk
    path = root / "runs" / "promuse" / "seed0" / "model.ckpt"
    trained = build_model(preset("promuse", s.train), pre, 0)
    params, _ = load_checkpoint(path)
    for n in params:
        trained.params[n].data[...] = params[n].data
    loaded, _ = load_model(path)
    rng = np.random.default_rng(9)
    exact = 0
    for _ in range(10):
        n = int(rng.integers(3, 20))
        ids, mask = pad_batch([[CLS] + list(rng.integers(N_RESERVED, len(pre.vocab), size=n))])
        grid = rng.normal(size=(1, 200, 5))
        a = trained.forward(ids, mask, grid, np.array([1.0]))
        b = loaded.forward(ids, mask, grid, np.array([1.0]))
        exact += all(np.array_equal(a[k].data, b[k].data) for k in ("logits_news", "logits_data", "logits_fusion",
                                                                     "v_news", "v_data"))
    ok = report(9, exact == 10, f"{exact}/10 random inputs give bit-identical outputs after save/load")
    assert ok
