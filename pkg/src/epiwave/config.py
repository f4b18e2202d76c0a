"""Run configuration: one YAML file drives a full experiment.

Every field has a default; unknown keys are rejected so typos fail fast.
Command-line flags override file values (flag > file > default).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import SegmentationConfig
from .errors import ConfigError
from .pretraining import ContrastiveConfig, PretrainSettings
from .synth import ScenarioConfig
from .training import TrainConfig


def default_planted_graph(n_channels: int = 8) -> np.ndarray:
    """Directed propagation structure used by the default scenario: a main
    chain with two branches and one shortcut."""
    edges = [(0, 1, 0.9), (1, 2, 0.9), (0, 3, 0.8), (3, 4, 0.9),
             (4, 5, 0.7), (2, 6, 0.8), (6, 7, 0.9), (1, 4, 0.6)]
    g = np.zeros((n_channels, n_channels))
    for i, j, w in edges:
        if i < n_channels and j < n_channels:
            g[i, j] = w
    return g


def default_scenario(seed: int = 0) -> ScenarioConfig:
    """Realistic-rate default: positive ratio lands near 0.003."""
    return ScenarioConfig(
        planted_graph=tuple(default_planted_graph().ravel().tolist()),
        event_rate=6.0,
        duration_seconds=3600.0,
        seed=seed,
    )


def benchmark_scenario(seed: int = 0, duration_seconds: float = 3200.0,
                       event_rate: float = 90.0) -> ScenarioConfig:
    """Desk-scale benchmark: 8 channels, 3 regions, event density high enough
    that a 20-epoch run sees plenty of positives."""
    return ScenarioConfig(
        planted_graph=tuple(default_planted_graph().ravel().tolist()),
        event_rate=event_rate,
        duration_seconds=duration_seconds,
        seed=seed,
    )


@dataclass
class EvaluationConfig:
    ratios: list = field(default_factory=lambda: ["1:5", "1:50", "1:500"])
    count_positive: int | None = None  # None = auto (largest feasible)
    seed: int = 0

    def ratio_tuples(self) -> list[tuple[int, int]]:
        out = []
        for r in self.ratios:
            out.append(parse_ratio(r))
        return out


def parse_ratio(text) -> tuple[int, int]:
    if isinstance(text, (tuple, list)) and len(text) == 2:
        return int(text[0]), int(text[1])
    try:
        num, den = str(text).split(":")
        return int(num), int(den)
    except ValueError as exc:
        raise ConfigError(f"ratio must look like 1:50, got {text!r}") from exc


@dataclass
class SplitConfig:
    train_fraction: float = 0.75  # leading span trains (with its own
    # validation tail); the remainder is held out for evaluation

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")


@dataclass
class PathsConfig:
    out_root: str = ""  # empty -> $EPIWAVE_OUT_ROOT or ./epiwave_runs


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=default_scenario)
    segmentation: SegmentationConfig = field(
        default_factory=lambda: SegmentationConfig(window_k=128, stride_l=128))
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    pretraining: PretrainSettings = field(default_factory=PretrainSettings)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        def encode(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: encode(getattr(obj, f.name))
                        for f in dataclasses.fields(obj)}
            if isinstance(obj, (list, tuple)):
                return [encode(v) for v in obj]
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            return obj

        return {f.name: encode(getattr(self, f.name))
                for f in dataclasses.fields(self)}

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "scenario": ScenarioConfig,
    "segmentation": SegmentationConfig,
    "contrastive": ContrastiveConfig,
    "pretraining": PretrainSettings,
    "training": TrainConfig,
    "evaluation": EvaluationConfig,
    "split": SplitConfig,
    "paths": PathsConfig,
}


def _build_section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    coerced = dict(values)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list) \
                and f.name in ("planted_graph", "event_duration_range",
                               "propagation_delay_range"):
            coerced[f.name] = tuple(
                np.asarray(coerced[f.name]).ravel().tolist()
                if f.name == "planted_graph" else coerced[f.name])
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {name!r}: {exc}") from exc


def load_run_config(path: str | Path | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from (optional) YAML plus per-section overrides.

    overrides maps section name -> {field: value} and wins over the file.
    """
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged = {}
    overrides = overrides or {}
    bad_override_sections = set(overrides) - set(_SECTION_TYPES)
    if bad_override_sections:
        raise ConfigError(f"unknown override sections: {sorted(bad_override_sections)}")
    for name, cls in _SECTION_TYPES.items():
        section = dict(raw.get(name, {}) or {})
        section.update(overrides.get(name, {}))
        merged[name] = _build_section(name, cls, section)
    return RunConfig(**merged)


def write_default_config(path: str | Path) -> Path:
    """Emit the full default configuration as a starting point."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(RunConfig().to_dict(), sort_keys=False))
    return path
