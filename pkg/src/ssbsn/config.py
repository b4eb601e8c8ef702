"""Plain-text run configuration: ``key = value`` lines under section headers.

    [network]   NetworkConfig fields (the init seed is derived from [train] seed)
    [train]     TrainConfig fields
    [pd]        s_train, s_test, pad_mode
    [paths]     dataset, val_dataset, checkpoint_dir, checkpoint, output_dir, log, image
    [data]      synthetic dataset recipe used by ``ssbsn synth``
    [bench]     sizes (e.g. ``24x24, 48x48``), channels, dhats

Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .network import NetworkConfig
from .pd import PDConfig
from .training import TrainConfig, substream_seed


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    dataset: str = ""
    val_dataset: str = ""
    checkpoint_dir: str = "checkpoints"
    checkpoint: str = ""
    output_dir: str = "out"
    log: str = ""
    image: str = ""

    def resolve(self, base: Path) -> "PathsConfig":
        def fix(p: str) -> str:
            return os.path.normpath(base / p) if p and not Path(p).is_absolute() else p
        return PathsConfig(**{f.name: fix(getattr(self, f.name)) for f in dataclasses.fields(self)})

    @property
    def log_path(self) -> Path:
        return Path(self.log) if self.log else Path(self.output_dir) / "metrics.log"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.checkpoint_dir) / "last.ssbsn"


@dataclass
class DataConfig:
    count: int = 16
    size: int = 64
    kind: str = "texture-mosaic"
    period: int = 12
    blur: float = 1 / 8  # motif smoothing width as a fraction of the period
    sigma: float = 25 / 255
    noise: str = "gaussian_iid"
    val_count: int = 4


@dataclass
class BenchConfig:
    sizes: tuple = ((24, 24), (48, 48), (128, 128))
    channels: tuple = (8, 32)
    dhats: tuple = (4, 6)


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pd: PDConfig = field(default_factory=PDConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def seed(self) -> int:
        return self.train.seed


_SECTIONS = {"network": NetworkConfig, "train": TrainConfig, "pd": PDConfig,
             "paths": PathsConfig, "data": DataConfig, "bench": BenchConfig}


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _sizes(text: str) -> tuple:
    out = []
    for item in text.replace(" ", "").split(","):
        if item:
            h, _, w = item.partition("x")
            out.append((int(h), int(w or h)))
    return tuple(out)


def _coerce(section: str, key: str, text: str, default):
    try:
        if section == "bench" and key == "sizes":
            return _sizes(text)
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {text!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, tuple):
            return _int_list(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from None


def parse_config(text: str, base: Optional[Path] = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                    for f in dataclasses.fields(cls)}
        if section == "network":
            defaults.pop("seed")
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _coerce(section, key, raw.strip(), defaults[key])
        values[section] = kwargs
    try:
        cfg = RunConfig(**{name: cls(**values.get(name, {})) for name, cls in _SECTIONS.items()})
        cfg.network.seed = substream_seed(cfg.train.seed, "init")
        cfg.network.validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    if base is not None:
        cfg.paths = cfg.paths.resolve(base)
    return cfg


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)
