"""Experiment configuration loaded from JSON with defaults materialized."""

import json
from dataclasses import dataclass, field, fields
from typing import Optional

from .errors import ConfigError
from .evaluation import EvalConfig
from .synthgen import GeneratorConfig, PRESETS, preset
from .trainer import TrainConfig

MODEL_KEYS = ("kind", "hidden_sizes", "nonlinearity", "heads")


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)
    seed: Optional[int] = None
    preset: str = "coco-like"

    def __post_init__(self):
        given = [p for p in self.paths.values() if p]
        if len(set(given)) != len(given):
            raise ConfigError("configured paths must be distinct")

    def to_dict(self):
        training = self.training.to_dict()
        return {
            "seed": self.seed,
            "preset": self.preset,
            "generator": self.generator.to_dict(),
            "training": {k: v for k, v in training.items() if k not in MODEL_KEYS},
            "model": {k: training[k] for k in MODEL_KEYS},
            "evaluation": self.evaluation.to_dict(),
            "paths": dict(self.paths),
        }


def _check_keys(section, data, allowed):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


def from_dict(data, seed=None):
    """Build an :class:`ExperimentConfig`; ``seed`` (e.g. from ``--seed``) wins."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", data,
                {"seed", "preset", "generator", "training", "model", "evaluation", "paths"})
    seed = data.get("seed") if seed is None else seed
    name = data.get("preset", "coco-like")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")

    gen = dict(data.get("generator", {}))
    if seed is not None:
        gen["seed"] = seed
    gen_fields = {f.name for f in fields(GeneratorConfig)}
    _check_keys("generator", gen, gen_fields)
    generator = preset(name, **gen)

    train = {**data.get("training", {}), **data.get("model", {})}
    _check_keys("training/model", train, {f.name for f in fields(TrainConfig)})
    if seed is not None:
        train["seed"] = seed
    try:
        training = TrainConfig(**train)
        evaluation = EvalConfig.from_dict(data.get("evaluation", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    paths = data.get("paths", {})
    _check_keys("paths", paths, {"corpus", "checkpoint", "reports"})
    return ExperimentConfig(generator, training, evaluation, dict(paths), seed, name)


def load(path=None, seed=None):
    if path is None:
        return from_dict({}, seed)
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data, seed)
