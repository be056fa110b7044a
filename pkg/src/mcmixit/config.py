"""Run configuration: a ``key = value`` file with sections plus command-line overrides.

Sections are ``[model]``, ``[train]``, ``[data]`` and ``[paths]``. Every key
has a default; unknown sections or keys are errors. Values are parsed by
the type of the key's default (tuples are comma-separated).
"""

from __future__ import annotations

import configparser
import os
from dataclasses import MISSING, dataclass, field, fields, replace

from .dataset import DataConfig
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["ConfigError", "PathsConfig", "RunConfig", "SECTIONS", "load_run_config", "describe_keys",
           "SEED_ENV"]

SEED_ENV = "MCMIXIT_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    """Where shards come from. Empty means generate examples on the fly."""

    unsupervised_shards: str = ""
    supervised_shards: str = ""
    supervised_kind: str = "supervised_filtered"
    on_the_fly: bool = True

    def __post_init__(self):
        if self.supervised_kind not in ("supervised_mixed", "supervised_filtered"):
            raise ValueError(f"supervised_kind must be supervised_mixed or supervised_filtered, "
                             f"got {self.supervised_kind!r}")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "paths": PathsConfig}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def unsupervised_data(self) -> DataConfig:
        return replace(self.data, kind="unsupervised_mom")

    def supervised_data(self) -> DataConfig:
        return replace(self.data, kind=self.paths.supervised_kind)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {f.name: getattr(section, f.name) for f in fields(section)}
        return out


def _default(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _parse(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(v.strip() for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


def _section_defaults(name: str, preset: str) -> dict:
    cls = SECTIONS[name]
    if name == "model":
        base = ModelConfig.tiny() if preset == "tiny" else ModelConfig()
        return {f.name: getattr(base, f.name) for f in fields(cls)}
    return {f.name: _default(f) for f in fields(cls)}


def describe_keys(preset: str = "tiny") -> str:
    """One line per config key with its default, for ``--help``."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in _section_defaults(name, preset).items():
            if isinstance(value, tuple):
                value = ",".join(value)
            lines.append(f"  {key} = {value}")
    return "\n".join(lines)


def load_run_config(path: str | None = None, overrides=(), preset: str = "tiny", env=None) -> RunConfig:
    """Build a :class:`RunConfig` from defaults, the file at ``path`` and ``overrides``.

    ``overrides`` are ``"section.key=value"`` strings applied last. If no seed
    is given anywhere, ``MCMIXIT_SEED`` seeds both data and training.
    """
    if preset not in ("tiny", "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    env = os.environ if env is None else env
    values = {name: _section_defaults(name, preset) for name in SECTIONS}
    explicit = set()

    def apply(section, key, raw, where):
        if section not in values:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in values[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        values[section][key] = _parse(raw, values[section][key], f"{section}.{key}")
        explicit.add((section, key))

    if path:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                apply(section, key, raw, str(path))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        apply(section, key.strip(), raw, "override")

    seed = env.get(SEED_ENV)
    if seed is not None and seed.strip():
        for section in ("data", "train"):
            if (section, "seed") not in explicit:
                values[section]["seed"] = _parse(seed, 0, SEED_ENV)
    try:
        return RunConfig(
            ModelConfig.from_dict(values["model"]),
            TrainConfig.from_dict(values["train"]),
            DataConfig.from_dict(values["data"]),
            PathsConfig(**values["paths"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
