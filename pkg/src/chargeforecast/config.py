"""Experiment configuration: one YAML file, unknown keys rejected.

Layout (every section and key is optional; omitted values take the
defaults of the corresponding dataclass)::

    seed: 2023
    data_dir: data
    output_dir: out
    horizons: [3, 6, 9, 12]
    market: {num_zones: 20, days: 14, ...}        # MarketSpec fields
    embedding: {layers: 2, heads: 4, beta: 0.5, ...}
    train: {batch_size: 512, max_epochs: 1000, ...}
    meta: {epochs: 200, meta_lr: 0.005, ...}
    laws:
      - {label: ev-charging-beijing, elasticity: -1.48, impulse_std: 0.1}
    impulse: {kind: percentile, magnitudes: [-0.3, ...], zones: dynamic}

The top-level ``seed`` drives every random stream, so ``seed`` is not
accepted inside the sections.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .analysis import ImpulseSpec
from .embedding import EmbeddingConfig
from .market import MarketSpec
from .model import ModelConfig
from .pretraining import DEFAULT_LAWS, ElasticityLaw, MetaConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _build(cls, section: str, values, allow_seed: bool = False):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    if not allow_seed:
        names.discard("seed")
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}")
    for k, v in values.items():
        if isinstance(v, list):
            values = {**values, k: tuple(v)}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 2023
    data_dir: str = "data"
    output_dir: str = "out"
    horizons: tuple = (3, 6, 9, 12)
    market: MarketSpec = field(default_factory=MarketSpec)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    laws: tuple = DEFAULT_LAWS
    impulse: ImpulseSpec = field(default_factory=lambda: ImpulseSpec(zones="dynamic"))

    def __post_init__(self):
        # one seed for everything
        object.__setattr__(self, "market", replace(self.market, seed=self.seed))
        object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if not self.horizons or any(int(h) < 1 for h in self.horizons):
            raise ConfigError("horizons must be positive integers")
        if not self.laws:
            raise ConfigError("at least one law is required")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(window=self.train.window, embedding=self.embedding)

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        raw = dict(raw or {})
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - top)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]}")
        kw = {}
        for key in ("seed",):
            if key in raw:
                kw[key] = int(raw[key])
        for key in ("data_dir", "output_dir"):
            if key in raw:
                kw[key] = str(raw[key])
        if "horizons" in raw:
            kw["horizons"] = tuple(int(h) for h in raw["horizons"])
        sections = {"market": MarketSpec, "embedding": EmbeddingConfig, "train": TrainConfig,
                    "meta": MetaConfig, "impulse": ImpulseSpec}
        for key, cls_ in sections.items():
            if key in raw:
                kw[key] = _build(cls_, key, raw[key])
        if "laws" in raw:
            if not isinstance(raw["laws"], list):
                raise ConfigError("laws must be a list")
            kw["laws"] = tuple(_build(ElasticityLaw, "laws", item, allow_seed=True)
                               for item in raw["laws"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        with path.open(encoding="utf-8") as fh:
            try:
                raw = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: not valid YAML ({exc.__class__.__name__})") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        def clean(obj):
            if isinstance(obj, tuple):
                return [clean(v) for v in obj]
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            return obj

        out = {
            "seed": self.seed,
            "data_dir": self.data_dir,
            "output_dir": self.output_dir,
            "horizons": list(self.horizons),
        }
        for key in ("market", "embedding", "train", "meta", "impulse"):
            section = asdict(getattr(self, key))
            section.pop("seed", None)
            out[key] = clean(section)
        out["laws"] = [asdict(law) for law in self.laws]
        return out

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, stored in checkpoints."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def override(self, **changes) -> "ExperimentConfig":
        """Copy with command-line overrides; ``None`` values are ignored."""
        changes = {k: v for k, v in changes.items() if v is not None}
        horizon = changes.pop("horizon", None)
        cfg = replace(self, **changes)
        if horizon is not None:
            cfg = replace(cfg, train=replace(cfg.train, horizon=int(horizon)))
        return cfg
