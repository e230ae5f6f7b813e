"""Run configuration: INI sections mapped onto the config dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .autoencoder import ArchitectureConfig, TrainConfig
from .synthetic import SynthConfig
from .trigger import MethodConfig, TriggerConfig
from .waveforms import PreprocessConfig

DEFAULT_DENOISE_SIGMA = 0.2


@dataclass
class ProjectionConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    anchor_weight: float = 0.01
    max_records: int = 512


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    folds: int = 5
    margin_seconds: float = 3.0


@dataclass
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(denoise_sigma=DEFAULT_DENOISE_SIGMA))
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("preprocess", "architecture", "train", "trigger", "method", "projection",
                "synth", "run")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(type(default[0])(p) for p in parts)
    if default is None:
        return None if text.lower() in ("none", "") else float(text)
    try:
        return type(default)(text)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def update_section(obj, values: dict[str, str], section: str):
    known = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in values.items():
        if key not in known:
            raise ValueError(f"[{section}] unknown key {key!r}")
        changes[key] = _parse(text, getattr(obj, key), f"{section}.{key}")
    return dataclasses.replace(obj, **changes)


def load_config(path=None) -> RunConfig:
    """Defaults, overlaid with the INI file at ``path`` if given."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if not parser.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    for section in parser.sections():
        if section not in RunConfig.SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        current = getattr(cfg, section)
        setattr(cfg, section, update_section(current, dict(parser[section]), section))
    return cfg


def dump_config(cfg: RunConfig, path=None) -> str:
    lines = []
    for section in RunConfig.SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            lines.append(f"{f.name} = {_format(getattr(getattr(cfg, section), f.name))}")
        lines.append("")
    text = "\n".join(lines)
    if path is not None:
        Path(path).write_text(text)
    return text
