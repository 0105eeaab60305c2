"""Experiment configuration: sectioned ``key = value`` files with strict validation."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigurationError
from .norms import NormSpec

DATASETS = ("synthetic", "cifar10", "cifar100", "mnist", "blend")
ARCHS = ("cifar", "small", "mlp", "patch")
CONTEXT_RULES = ("none", "superclass", "dataset", "gmm", "custom", "synthetic")


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    sources: str = ""  # blend only, e.g. "cifar100,mnist"
    cifar10_dir: str = ""
    cifar100_dir: str = ""
    mnist_dir: str = ""
    subset: int = 0  # keep the first N training samples after a seeded shuffle, 0 = all
    test_subset: int = 0
    val_fraction: float = 0.1
    standardize: bool = True
    flip: bool = False
    crop_pad: int = 0
    # synthetic mixture
    n_contexts: int = 3
    samples_per_context: int = 2000
    test_per_context: int = 500
    n_classes: int = 4
    channels: int = 3
    image_size: int = 8
    separation: float = 4.0
    pixel_noise: float = 0.5
    data_seed: int = 0


@dataclass
class ModelConfig:
    arch: str = "small"
    norm: str = "batch"
    mixture_slot: str = ""  # empty means the architecture default
    context_input: str = "none"  # none | channels | patches
    embed_dim: int = 64
    patch_size: int = 4
    widths: str = "16,32"
    hidden: str = "64"
    epsilon: float = 1e-5
    momentum: float = 0.1


@dataclass
class ContextConfig:
    rule: str = "none"
    n_contexts: int = 0  # 0 = taken from the rule
    gmm_components: int = 3
    assignment_file: str = ""
    test_assignment_file: str = ""
    em_max_iter: int = 200
    em_tol: float = 1e-6


@dataclass
class OptimConfig:
    lr: float = 0.001
    weight_decay: float = 2e-5
    momentum: float = 0.9
    alpha: float = 0.9
    eps: float = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    patience: int = 0  # 0 disables early stopping
    inference: str = "cn"
    output_dir: str = "runs/default"
    wallclock_in_csv: bool = False
    checkpoint: bool = True


SECTIONS = {"data": DataConfig, "model": ModelConfig, "context": ContextConfig,
            "optim": OptimConfig, "train": TrainConfig}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        d, m, c, o, t = self.data, self.model, self.context, self.optim, self.train
        _choice("data", "dataset", d.dataset, DATASETS)
        _choice("model", "arch", m.arch, ARCHS)
        _choice("model", "context_input", m.context_input, ("none", "channels", "patches"))
        _choice("context", "rule", c.rule, CONTEXT_RULES)
        _choice("train", "inference", t.inference, ("cn", "cn+"))
        try:
            NormSpec.parse(m.norm)
        except (ConfigurationError, ValueError) as exc:
            raise ConfigurationError(f"[model] norm: {exc}") from None
        if d.dataset == "blend" and len([s for s in d.sources.split(",") if s.strip()]) < 2:
            raise ConfigurationError("[data] sources: blending needs at least two comma-separated datasets")
        if not 0 <= d.val_fraction < 1:
            raise ConfigurationError("[data] val_fraction must lie in [0, 1)")
        if m.context_input != "none" and c.rule == "none":
            raise ConfigurationError("[context] rule: a context input layer needs a context rule")
        if c.rule == "gmm" and c.gmm_components < 1:
            raise ConfigurationError("[context] gmm_components must be >= 1")
        if o.lr < 0 or o.weight_decay < 0:
            raise ConfigurationError("[optim] lr and weight_decay must be non-negative")
        if t.epochs < 1 or t.batch_size < 1:
            raise ConfigurationError("[train] epochs and batch_size must be >= 1")
        for name in ("widths", "hidden"):
            try:
                int_list(getattr(m, name))
            except ValueError:
                raise ConfigurationError(f"[model] {name}: expected comma-separated integers") from None
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        parts = {}
        for section, kind in SECTIONS.items():
            values = dict(doc.get(section, {}))
            names = {f.name for f in fields(kind)}
            unknown = sorted(set(values) - names)
            if unknown:
                raise ConfigurationError(f"[{section}] unknown keys {unknown}")
            parts[section] = kind(**values)
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown sections {unknown}")
        return cls(**parts).validate()

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for f in fields(getattr(self, section)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, section), f.name))}")
            lines.append("")
        return "\n".join(lines)


def int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _choice(section, key, value, allowed):
    if value not in allowed:
        raise ConfigurationError(f"[{section}] {key}: {value!r} is not one of {list(allowed)}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(kind, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    return kind(text.strip()) if kind is not str else text.strip().strip('"')


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to its 1-based line for diagnostics."""
    where, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            where[(section, "")] = no
        elif section is not None and "=" in line and not line.startswith(("#", ";")):
            where[(section, line.split("=", 1)[0].strip().lower())] = no
    return where


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    where = _line_numbers(text)
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"{source}:{where.get((section, ''), '?')}: unknown section [{section}]")
        target = getattr(cfg, section)
        types = {f.name: f.type for f in fields(target)}
        for key, value in parser.items(section):
            line = where.get((section, key), "?")
            if key not in types:
                raise ConfigurationError(f"{source}:{line}: unknown key {key!r} in [{section}]")
            kind = {"int": int, "float": float, "bool": bool, "str": str}[types[key]]
            try:
                setattr(target, key, _convert(kind, value))
            except ValueError as exc:
                raise ConfigurationError(f"{source}:{line}: [{section}] {key}: {exc}") from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
