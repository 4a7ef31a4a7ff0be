import dataclasses

import pytest

from promuse.config import NewsSize
from promuse.encoders import MLMConfig
from promuse.pipeline import artifacts, pretrain_artifacts
from promuse.synth import SynthConfig, generate
from promuse.training import PretrainConfig, RunConfig

TINY_SYNTH = SynthConfig(n_stocks=6, n_days=60, dev_days=8, test_days=8, news_prob_train=0.9,
                         news_prob_dev=0.9, news_prob_test=0.9, seed=3)
TINY_NEWS = NewsSize(n_layers=1, d=16, n_heads=2, max_positions=48)
TINY_MLM = MLMConfig(epochs=1, seed=3)
TINY_PRE = PretrainConfig(epochs=1, learning_rate=1e-3, n_layers=1, d=16, n_heads=2, seed=3)


def tiny_run(**kw) -> RunConfig:
    base = dict(epochs=1, seeds=(0,), d_align=8, prompt_len=4, batch_size=16, learning_rate=1e-3)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate(TINY_SYNTH, root / "data")
    pretrain_artifacts(root / "data", root / "pre", TINY_NEWS, TINY_MLM, TINY_PRE)
    return root / "data", root / "pre"


@pytest.fixture(scope="session")
def tiny(tiny_dirs):
    """(Pretrained, DataBundle) at toy sizes."""
    return artifacts(*tiny_dirs)


@pytest.fixture
def run_cfg():
    return tiny_run


def expected_census(pre, cfg):
    """Trainable names and value count of a prompt-mode linear-fusion model,
    rebuilt from its components rather than read off the model."""
    import numpy as np

    from promuse.encoders import DataEncoder, PromptBank
    from promuse.fusion import LinearFusion, Projector
    from promuse.nn import Linear
    from promuse.params import ParameterSet

    p, rng, d = ParameterSet(), np.random.default_rng(0), pre.news_cfg.d
    PromptBank(p, "news.prompts", pre.news_cfg.n_layers, d, rng, cfg.prompt_len)
    Linear(p, "news.head", d, 2, rng)
    DataEncoder(p, pre.data_cfg, rng)
    Projector(p, d, pre.data_cfg.d, rng, cfg.d_align)
    LinearFusion(p, cfg.d_align, rng)
    return set(p.trainable_names()), p.n_values()


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
