"""Run configuration as a flat text file of dotted keys.

    # comments start with '#'
    data.seed = 0
    train.alpha = 0.1
    eval.k_list = 1, 5, 10, 25, 50, 100

Every key has a default; unknown keys are an error. ``dumps`` writes every
resolved key so the echoed file reproduces a run when fed back in.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DataConfig
from .networks import BundleConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ModelConfig:
    f_widths: tuple = BundleConfig.f_widths
    c_width: int = BundleConfig.c_width
    g_widths: tuple = BundleConfig.g_widths
    d_widths: tuple = BundleConfig.d_widths
    aux_width: int = BundleConfig.aux_width
    g_dropout: float = BundleConfig.g_dropout
    slope: float = BundleConfig.slope


@dataclass(frozen=True)
class EvalConfig:
    upsample: int = 1
    pool_per_domain: int = 200
    queries_per_domain: int = 100
    k_list: tuple = (1, 5, 10, 25, 50, 100)

    def __post_init__(self):
        if self.upsample < 1:
            raise ValueError("eval.upsample must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def bundle_config(self) -> BundleConfig:
        return BundleConfig(image_size=(self.data.height, self.data.width), num_classes=self.data.num_classes,
                            **dataclasses.asdict(self.model))


SECTIONS = ("data", "model", "train", "eval")


class ConfigError(ValueError):
    pass


def _parse(text: str, like, key: str):
    if isinstance(like, bool):
        low = text.lower()
        if low not in ("true", "false"):
            raise ConfigError(f"{key}: expected true/false, got {text!r}")
        return low == "true"
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        elem = type(like[0]) if like else int
        return tuple(_parse(p, elem(), key) for p in parts)
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(like).__name__}") from None
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    updates = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown key {key!r} (sections: {', '.join(SECTIONS)})")
        current = getattr(base, section)
        known = {f.name for f in fields(current)}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _parse(value, getattr(current, name), key)
    try:
        return replace(base, **{s: replace(getattr(base, s), **u) for s, u in updates.items() if u})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def dumps(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {_render(getattr(sub, f.name))}")
        lines.append("")
    return "\n".join(lines)


def override(cfg: RunConfig, **train_fields) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **train_fields))
