"""Strict JSON run configuration shared by the CLI subcommands.

Unknown keys anywhere are errors. Sections that do not set their own
``seed`` inherit the top-level one.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, NemesisError
from .model.network import ModelConfig
from .probe import ProbeConfig
from .training import TrainConfig


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    n_train: int = 18
    n_test: int = 12
    jitter: float = 0.05
    scale_jitter: float = 0.15
    background: float = -1000.0
    texture_sigma: float = 0.0
    organs: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "organs", tuple(dict(o) for o in self.organs))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ConfigError(f"phantom dims must be three positive extents, got {self.dims}")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ConfigError("phantom corpus needs at least one volume")
        if self.jitter < 0 or self.scale_jitter < 0 or self.texture_sigma < 0:
            raise ConfigError("jitter, scale_jitter and texture_sigma must be >= 0")


@dataclass(frozen=True)
class BenchConfig:
    volume_dims: tuple = (64, 64, 64)
    reference_dims: tuple = (512, 512, 400)
    reference_patch: int = 16
    reference_superpatch: int = 128
    reference_dim: int = 768
    reference_depth: int = 12

    def __post_init__(self):
        for name in ("volume_dims", "reference_dims"):
            dims = tuple(int(n) for n in getattr(self, name))
            if len(dims) != 3 or min(dims) <= 0:
                raise ConfigError(f"{name} must be three positive extents")
            object.__setattr__(self, name, dims)


@dataclass(frozen=True)
class PathsConfig:
    corpus: str = ""
    out: str = ""
    checkpoint: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    window: tuple = (-200.0, 300.0)
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    explicit: frozenset = frozenset()

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "window": list(self.window), "threads": self.threads}
        for name in _SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "probe": ProbeConfig,
             "phantom": PhantomConfig, "bench": BenchConfig, "paths": PathsConfig}


def _plain(x):
    if isinstance(x, tuple):
        return [_plain(i) for i in x]
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    return x


def build_section(cls, data: dict, where: str, seed: int | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    values = dict(data)
    if seed is not None and "seed" in names and "seed" not in values:
        values["seed"] = seed
    try:
        return cls(**values)
    except NemesisError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def run_config_from_dict(data: dict, seed_override: int | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {"seed", "window", "threads", *_SECTIONS}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    seed = int(data.get("seed", 0) if seed_override is None else seed_override)
    window = tuple(float(x) for x in data.get("window", (-200.0, 300.0)))
    if len(window) != 2 or not window[0] < window[1]:
        raise ConfigError(f"window must be [lo, hi] with lo < hi, got {list(window)}")
    threads = int(data.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    sections = {name: build_section(cls, data.get(name, {}), name, seed)
                for name, cls in _SECTIONS.items()}
    return RunConfig(seed, window, threads, explicit=frozenset(k for k in data if k in _SECTIONS),
                     **sections)


def load_run_config(path=None, seed_override: int | None = None) -> RunConfig:
    if path is None:
        return run_config_from_dict({}, seed_override)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    return run_config_from_dict(data, seed_override)
