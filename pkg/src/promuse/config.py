"""Plain-text run configuration: ``key = value`` lines grouped in sections,
merged with command-line overrides, always dumped in resolved form.

Sections and the dataclass each one fills:

    [synth]     SynthConfig      synthetic market
    [mlm]       MLMConfig        news backbone masked-token pre-training
    [news]      NewsSize         news backbone shape
    [pretrain]  PretrainConfig   Data Encoder pre-training (shape included)
    [train]     RunConfig        main training / evaluation

Values are parsed by the type of the field's default. Sequences are
comma-separated; ``weights`` takes four numbers (news, data, fusion, align).
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional

from .encoders import MLMConfig, news_config
from .synth import SynthConfig
from .training import LossWeights, PretrainConfig, RunConfig

SEED_ENV = "PROMUSE_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class NewsSize:
    n_layers: int = 2
    d: int = 64
    n_heads: int = 4
    max_positions: int = 48
    dropout: float = 0.1

    def transformer(self):
        return news_config(self.n_layers, self.d, self.n_heads, dropout=self.dropout,
                           max_positions=self.max_positions)


# desk-scale defaults that differ from the dataclass defaults
DESK = {
    "pretrain": {"epochs": 15, "learning_rate": 1e-3, "n_layers": 1, "d": 32, "n_heads": 4},
}


@dataclass
class Settings:
    synth: SynthConfig = field(default_factory=SynthConfig)
    mlm: MLMConfig = field(default_factory=MLMConfig)
    news: NewsSize = field(default_factory=NewsSize)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(**DESK["pretrain"]))
    train: RunConfig = field(default_factory=RunConfig)

    SECTIONS = ("synth", "mlm", "news", "pretrain", "train")


def _parse(raw: str, default, key: str):
    s = raw.strip()
    if isinstance(default, bool):
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, LossWeights):
        parts = [p for p in s.split(",") if p.strip()]
        if len(parts) != 4:
            raise ConfigError(f"{key}: expected 4 comma-separated weights")
        return LossWeights(*(float(p) for p in parts))
    if isinstance(default, tuple):
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{key}: empty list")
        elem = default[0] if default else 0
        return tuple(_parse(p, elem, key) for p in parts)
    try:
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None
    return s


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, LossWeights):
        return ", ".join(repr(getattr(v, k)) for k in ("news", "data", "fusion", "align"))
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def apply(settings: Settings, section: str, key: str, raw: str) -> None:
    if section not in Settings.SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(settings, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {section}.{key}")
    setattr(obj, key, _parse(raw, getattr(obj, key), f"{section}.{key}"))


def parse_override(text: str):
    """``section.key=value`` -> (section, key, value)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    lhs, value = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return section, key.strip(), value


def load(path: Optional[os.PathLike] = None, overrides: Iterable[str] = (),
         env: Optional[Dict[str, str]] = None) -> Settings:
    """Defaults <- config file <- overrides <- PROMUSE_SEED."""
    settings = Settings()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(str(p))
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(p.read_text())
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                apply(settings, section, key, raw)
    for text in overrides:
        apply(settings, *parse_override(text))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        set_seed(settings, _parse(env[SEED_ENV], 0, SEED_ENV))
    return validate(settings)


def set_seed(settings: Settings, seed: int) -> None:
    """One base seed for every stage; training keeps its seed count and
    uses consecutive seeds from the base."""
    settings.synth.seed = seed
    settings.mlm.seed = seed
    settings.pretrain.seed = seed
    settings.train.seeds = tuple(seed + i for i in range(len(settings.train.seeds)))


def validate(settings: Settings) -> Settings:
    try:
        settings.synth.validate()
        settings.mlm.validate()
        settings.news.transformer()
        settings.pretrain.validate()
        settings.pretrain.transformer()
        settings.train.__post_init__()
        settings.train.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return settings


def dumps(settings: Settings) -> str:
    out = io.StringIO()
    for section in Settings.SECTIONS:
        obj = getattr(settings, section)
        out.write(f"[{section}]\n")
        for f in dataclasses.fields(obj):
            out.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def dump(settings: Settings, path) -> None:
    Path(path).write_text(dumps(settings))
