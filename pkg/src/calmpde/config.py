"""Declarative run configuration stored as INI with JSON-literal values.

Sections mirror the modules: ``[run]``, ``[data]``, ``[codec]``,
``[processor]`` and ``[training]``. Unset keys take dataclass defaults and the
resolved file written to a run directory lists every key.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .calm import ConfigError
from .codec import CodecConfig
from .geometry import PointSet
from .model import CalmPDE
from .processor import ProcessorConfig
from .training import TrainConfig


@dataclass
class RunSection:
    name: str = "run"
    seed: int = 0
    dtype: str = "float32"
    threads: int = 1


@dataclass
class DataSection:
    pde: str = "advection1d"
    path: str = ""
    n_samples: int = 576
    n_points: int = 256
    n_timesteps: int = 21
    n_test: int = 64
    seed: int = 0
    params: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    codec: CodecConfig = field(default_factory=CodecConfig)
    processor: ProcessorConfig = field(default_factory=ProcessorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("run", "data", "codec", "processor", "training")

    def validate(self, n_points: int | None = None, n_channels: int | None = None,
                 n_dims: int | None = None) -> list[str]:
        """Every violated constraint; dataset facts default to the ``[data]`` section."""
        errs = []
        if self.run.dtype not in ("float32", "float64"):
            errs.append("run.dtype must be float32 or float64")
        if self.run.threads < 1:
            errs.append("run.threads must be >= 1")
        errs += self.codec.validate() + self.processor.validate() + self.training.validate()
        n_points = self.data.n_points if n_points is None else n_points
        if n_channels is not None and n_channels != self.codec.n_channels:
            errs.append(f"codec.n_channels={self.codec.n_channels} but the dataset has {n_channels} channel(s)")
        if n_dims is not None and n_dims != self.codec.n_dims:
            errs.append(f"codec.n_dims={self.codec.n_dims} but the dataset mesh is {n_dims}-D")
        n_c = self.codec.n_channels if n_channels is None else n_channels
        if self.codec.latent_size >= n_points * n_c:
            errs.append(f"latent size {self.codec.latent_size} (l={self.codec.latent_tokens} x "
                        f"d={self.codec.latent_dim}) does not compress N*N_c={n_points * n_c}")
        if self.data.n_test >= self.data.n_samples:
            errs.append("data.n_test must be smaller than data.n_samples")
        return errs

    def check(self, **dataset_facts):
        errs = self.validate(**dataset_facts)
        if errs:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(errs))
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.run.dtype)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        cfg, errs = _build(d)
        if errs:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(errs))
        return cfg

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {json.dumps(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path):
        Path(path).write_text(self.to_ini())


_TYPES = {"run": RunSection, "data": DataSection, "codec": CodecConfig,
          "processor": ProcessorConfig, "training": TrainConfig}


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _type_ok(value, default) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def _build(d: dict) -> tuple[RunConfig, list[str]]:
    errs, sections = [], {}
    for name in d:
        if name not in _TYPES:
            errs.append(f"unknown section [{name}]")
    for name, typ in _TYPES.items():
        base = typ()
        given = d.get(name, {}) or {}
        kwargs = {}
        known = {f.name for f in dataclasses.fields(typ)}
        for key, value in given.items():
            if key not in known:
                errs.append(f"{name}.{key} is not a known key")
                continue
            default = getattr(base, key)
            value = _coerce(value, default)
            if not _type_ok(value, default):
                errs.append(f"{name}.{key}={value!r} has the wrong type (expected like {default!r})")
                continue
            kwargs[key] = value
        sections[name] = dataclasses.replace(base, **kwargs)
    return RunConfig(**sections), errs


def parse_ini(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    raw, errs = {}, []
    for section in parser.sections():
        raw[section] = {}
        for key, text_value in parser.items(section):
            try:
                raw[section][key] = json.loads(text_value)
            except json.JSONDecodeError:
                raw[section][key] = text_value  # bare strings are allowed
    cfg, build_errs = _build(raw)
    errs += build_errs
    if errs:
        raise ConfigError(f"{source}: invalid configuration:\n  - " + "\n  - ".join(errs))
    return cfg


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("calmpde.configs").iterdir() if p.name.endswith(".ini"))


def load_config(name_or_path) -> RunConfig:
    """Read an INI file, or a shipped preset by name (e.g. ``advection1d``)."""
    path = Path(name_or_path)
    if path.is_file():
        return parse_ini(path.read_text(), str(path))
    res = resources.files("calmpde.configs") / f"{name_or_path}.ini"
    if res.is_file():
        return parse_ini(res.read_text(), f"preset {name_or_path}")
    raise ConfigError(f"no config file or preset named {name_or_path!r} (presets: {', '.join(preset_names())})")


def build_model(cfg: RunConfig, mesh: PointSet | None, dt: float) -> CalmPDE:
    return CalmPDE(cfg.codec, cfg.processor, dt, seed=cfg.run.seed, mesh=mesh, dtype=cfg.np_dtype)
