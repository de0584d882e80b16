"""One flat experiment config: corpus, model, training and evaluation knobs."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus import bridge_graph, pivot_graph
from .errors import ConfigurationError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class ExperimentConfig:
    """All settings of one run. Defaults are the desk-scale recipe."""

    # corpus
    n_languages: int = 6
    n_concepts: int = 50
    min_len: int = 3
    max_len: int = 12
    train_per_edge: int = 4000
    n_valid: int = 50
    n_test: int = 50
    graph: str = "pivot"  # "pivot" or "bridge"
    pivot: int = 0
    groups: list = field(default_factory=list)  # bridge graph: list of language-id lists
    bridges: list = field(default_factory=list)  # bridge graph: list of bridge ids per group
    corpus_seed: int = 0
    # model
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    attention_dropout: float = 0.1
    max_positions: int = 128
    variant: str = "registering"
    ratio: float = 1.0
    # training
    lr_peak: float = 5e-4
    warmup_steps: int = 400
    max_steps: int = 5000
    batch_tokens: int = 2048
    label_smoothing: float = 0.1
    sampling_temperature: float = 5.0
    seed: int = 1234
    mode: str = "full"
    lora_rank: int = 8
    lora_directions: list = field(default_factory=list)  # "src-tgt" strings; empty = all supervised
    finetune_per_direction: int = 200  # fresh instances per lora direction
    clip_norm: float = 1.0
    accum_steps: int = 1
    valid_interval: int = 500
    average_last: int = 5
    precision: str = "float64"  # training arithmetic: "float64" or "float32"
    # evaluation / analysis
    beam: int = 5
    eval_batch_size: int = 32
    analyze_samples: int = 100
    analyze_seed: int = 0

    def __post_init__(self):
        if self.graph not in ("pivot", "bridge"):
            raise ConfigurationError(f"graph must be 'pivot' or 'bridge', got {self.graph!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError(f"precision must be 'float64' or 'float32', got {self.precision!r}")
        if self.beam < 1:
            raise ConfigurationError("beam must be >= 1")
        self.model_config(vocab_size=3 + self.n_languages * (1 + self.n_concepts))
        self.train_config()

    # -- views -------------------------------------------------------------

    def model_config(self, vocab_size: int) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
        return ModelConfig(vocab_size=vocab_size, **{k: getattr(self, k) for k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def connectivity(self):
        if self.graph == "pivot":
            return pivot_graph(self.n_languages, self.pivot)
        return bridge_graph(self.n_languages, self.pivot, [tuple(g) for g in self.groups], [tuple(b) for b in self.bridges])

    def lora_edges(self) -> list[tuple[int, int]]:
        return [parse_direction(d) for d in self.lora_directions]

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        return cls.from_dict(raw)

    def with_overrides(self, assignments: list[str]) -> "ExperimentConfig":
        """Apply ``key=value`` strings; values are parsed as JSON, falling back to plain strings."""
        raw = self.to_dict()
        hints = typing.get_type_hints(type(self))
        for item in assignments:
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigurationError(f"override {item!r} is not key=value")
            if key not in raw:
                raise ConfigurationError(f"unknown config key {key!r}")
            raw[key] = _coerce(value, hints[key], key)
        return type(self).from_dict(raw)


def _coerce(text: str, hint, key: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    ok = {int: lambda v: isinstance(v, int) and not isinstance(v, bool), float: lambda v: isinstance(v, float),
          str: lambda v: isinstance(v, str), list: lambda v: isinstance(v, list)}[hint](value)
    if not ok:
        raise ConfigurationError(f"{key}: cannot use {text!r} as {hint.__name__}")
    return value


def parse_direction(text: str) -> tuple[int, int]:
    src, sep, tgt = str(text).partition("-")
    try:
        return int(src), int(tgt)
    except ValueError:
        raise ConfigurationError(f"direction {text!r} is not 'src-tgt'") from None
