"""Experiment configuration files.

A config is an INI file with up to four sections::

    [data]        GeneratorConfig fields (dims, identity counts, noise levels)
    [model]       trunk_widths, head_width, embed_dim, bn_momentum, and
                  optionally share_weights / share_batch_stats
    [train]       TrainConfig fields except seed
    [experiment]  seeds, variants, workers, out

Input dims and the class count are taken from ``[data]``; every seed in
``seeds`` drives the generator, the initializer and the shuffler alike.
Sharing flags normally follow the variant and may only be pinned for single
runs, where they are checked against the variant before training. Unknown
sections or keys are errors, since a silent typo would corrupt an ablation.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import GeneratorConfig
from .model import ModelConfig
from .trainer import GRID_VARIANTS, VARIANTS, TrainConfig, check_consistency, resolve_model_config


class ConfigError(ValueError):
    pass


_DERIVED_MODEL = ("face_dim", "peri_dim", "num_classes", "seed")
_SHARING = ("share_weights", "share_batch_stats")
_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig) if f.name not in _DERIVED_MODEL + _SHARING)
_DATA_KEYS = tuple(f.name for f in fields(GeneratorConfig) if f.name != "seed")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")
_EXPERIMENT_KEYS = ("seeds", "variants", "workers", "out")


@dataclass(frozen=True)
class ExperimentConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    share_weights: bool | None = None
    share_batch_stats: bool | None = None
    seeds: tuple[int, ...] = (0,)
    variants: tuple[str, ...] = GRID_VARIANTS
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def with_seeds(self, seeds) -> ExperimentConfig:
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def generator(self, seed: int) -> GeneratorConfig:
        return replace(self.data, seed=seed)

    def model_for(self, variant: str, seed: int) -> ModelConfig:
        base = replace(self.model, face_dim=self.data.face_dim, peri_dim=self.data.peri_dim,
                       num_classes=self.data.num_train_ids, seed=seed)
        resolved = resolve_model_config(base, variant)
        pinned = {k: getattr(self, k) for k in _SHARING if getattr(self, k) is not None}
        return replace(resolved, **pinned) if pinned else resolved

    def train_for(self, variant: str, seed: int) -> TrainConfig:
        return replace(self.train, variant=variant, seed=seed)

    def validate(self, variants=None) -> None:
        """Check every (variant, seed) combination before anything runs."""
        for v in variants or self.variants:
            for s in self.seeds:
                try:
                    check_consistency(self.model_for(v, s), self.train_for(v, s))
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section(parser, name: str, allowed, template, extra_msg: str = "") -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in allowed:
            hint = f" ({extra_msg})" if extra_msg and key in _DERIVED_MODEL + ("seed",) else ""
            raise ConfigError(f"unknown key {key!r} in [{name}]{hint}")
        out[key] = _parse_value(raw, getattr(template, key), f"{name}.{key}")
    return out


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    extra = set(parser.sections()) - {"data", "model", "train", "experiment"}
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    derived = "dims and classes come from [data]; seeds from [experiment]"
    data = _section(parser, "data", _DATA_KEYS, GeneratorConfig(), derived)
    sharing = {k: None for k in _SHARING}
    if parser.has_section("model"):
        for k in _SHARING:
            if parser.has_option("model", k):
                sharing[k] = _parse_value(parser.get("model", k), True, f"model.{k}")
                parser.remove_option("model", k)
    model = _section(parser, "model", _MODEL_KEYS, ModelConfig(), derived)
    train = _section(parser, "train", _TRAIN_KEYS, TrainConfig(), derived)
    exp = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
            exp[key] = raw.strip()
    try:
        cfg = ExperimentConfig(
            data=GeneratorConfig(**data), model=ModelConfig(**model), train=TrainConfig(**train),
            **sharing,
            seeds=_parse_value(exp.get("seeds", "0"), (0,), "experiment.seeds"),
            variants=tuple(v.strip() for v in exp.get("variants", ",".join(GRID_VARIANTS)).split(",")
                           if v.strip()),
            workers=_parse_value(exp.get("workers", "1"), 1, "experiment.workers"),
            out=exp.get("out") or None)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Read a config file; ``None`` gives the all-defaults config."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    """The fully resolved config, every default spelled out."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["data"] = {k: _format_value(getattr(cfg.data, k)) for k in _DATA_KEYS}
    model = {k: _format_value(getattr(cfg.model, k)) for k in _MODEL_KEYS}
    for k in _SHARING:
        if getattr(cfg, k) is not None:
            model[k] = _format_value(getattr(cfg, k))
    parser["model"] = model
    parser["train"] = {k: _format_value(getattr(cfg.train, k)) for k in _TRAIN_KEYS}
    exp = {"seeds": _format_value(cfg.seeds), "variants": ", ".join(cfg.variants),
           "workers": str(cfg.workers)}
    if cfg.out:
        exp["out"] = cfg.out
    parser["experiment"] = exp
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg))
    return path


def as_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
