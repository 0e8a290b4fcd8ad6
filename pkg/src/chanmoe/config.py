"""Layered run configuration: JSON file plus ``--section.key value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

from . import storage
from .channel_sim import ScenarioConfig
from .exceptions import ConfigurationError
from .model import ModelConfig
from .signal_ops import SeConfig
from .tasks import DatasetConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    snr_db: float = 10.0
    batch_size: int = 256
    timing_repeats: int = 10
    ablation_samples: Optional[int] = 300
    ablation_epochs: int = 4
    expert_layers: Sequence[int] = (0, 1)

    def se_config(self) -> SeConfig:
        return SeConfig(self.snr_db)


SECTIONS = {
    "scenario": ScenarioConfig,
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, dict]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def hash(self) -> str:
        return storage.content_hash(self.to_dict())

    @property
    def seed(self) -> int:
        return self.dataset.seed

    @classmethod
    def from_dict(cls, d: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            values = dict(d.get(name, {}))
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - names
            if bad:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
            try:
                parts[name] = klass(**{k: _coerce(v) for k, v in values.items()})
            except TypeError as exc:
                raise ConfigurationError(f"bad [{name}] section: {exc}") from exc
        return cls(**parts)


def _coerce(v):
    return tuple(v) if isinstance(v, list) else v


def parse_value(text: str):
    """JSON literal if it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: Dict[str, dict], overrides: Sequence[str]) -> Dict[str, dict]:
    """Apply ``["--section.key", "value", ...]`` pairs (``--section.key=value`` also accepted)."""
    out = {k: dict(v) for k, v in d.items()}
    items = list(overrides)
    i = 0
    while i < len(items):
        flag = items[i]
        if not flag.startswith("--") or "." not in flag:
            raise ConfigurationError(f"bad override {flag!r}; expected --section.key value")
        if "=" in flag:
            flag, value = flag.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigurationError(f"override {flag} lacks a value")
            value = items[i + 1]
            i += 2
        section, key = flag[2:].split(".", 1)
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        out.setdefault(section, {})[key] = parse_value(value)
    return out


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    base: Dict[str, dict] = {}
    if path:
        try:
            base = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(apply_overrides(base, overrides))


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
