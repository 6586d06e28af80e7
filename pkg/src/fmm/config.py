"""Experiment configuration files (YAML or JSON)."""

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from fmm.data import TaskConfig
from fmm.exceptions import ConfigurationError
from fmm.importance import MEASURES
from fmm.io import config_hash
from fmm.model import ModelConfig
from fmm.training import Hyperparams, TrainStrategy, ValStrategy

OUTPUT_ROOT_ENV = "FMM_OUTPUT_ROOT"

DEFAULT_STRATEGIES = (("use_5050", "use_both"), ("no_masking", "no_masking"))
DEFAULT_MEASURES = (
    "grad_l1", "grad_l2", "x_grad_signed", "x_grad_abs", "ig_signed", "ig_abs",
    "loo_signed", "loo_abs", "beam",
)


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    strategies: list = field(default_factory=lambda: [list(s) for s in DEFAULT_STRATEGIES])
    measures: list = field(default_factory=lambda: list(DEFAULT_MEASURES))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    alpha: float = 0.05
    output_dir: str = ""
    faithfulness_size: int = 0
    ood_ratios: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    beam_width: int = 10
    bootstrap_resamples: int = 10_000
    metric: str = "accuracy"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if not self.strategies:
            raise ConfigurationError("at least one (train, val) strategy pair is required")
        for ts, vs in self.strategies:
            TrainStrategy(ts)
            ValStrategy(vs)
        for m in self.measures:
            if m not in MEASURES or m == "random":
                raise ConfigurationError(f"unknown measure {m!r}")
        if self.beam_width < 1:
            raise ConfigurationError("beam_width must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        special = (self.model.pad_token_id, self.model.cls_token_id, self.model.mask_token_id)
        if special != self.task.special_ids:
            raise ConfigurationError("task and model disagree on special token ids")
        if self.task.vocab_size != self.model.vocab_size:
            raise ConfigurationError("task and model disagree on vocab_size")
        if self.task.max_len > self.model.max_seq_len:
            raise ConfigurationError("task sequences exceed the model's max_seq_len")
        if self.task.num_classes != self.model.num_classes:
            raise ConfigurationError("task and model disagree on num_classes")

    @property
    def primary_strategy(self):
        return tuple(self.strategies[0])

    def to_dict(self):
        return {
            "task": self.task.to_dict(),
            "model": self.model.to_dict(),
            "hyperparams": self.hyperparams.to_dict(),
            "strategies": [list(s) for s in self.strategies],
            "measures": list(self.measures),
            "seeds": list(self.seeds),
            "alpha": self.alpha,
            "faithfulness_size": self.faithfulness_size,
            "ood_ratios": list(self.ood_ratios),
            "beam_width": self.beam_width,
            "bootstrap_resamples": self.bootstrap_resamples,
            "metric": self.metric,
        }

    @property
    def hash(self):
        # output location and the OOD decision level are not part of the
        # experiment's identity; alpha is recorded in each artifact instead
        d = self.to_dict()
        d.pop("alpha")
        return config_hash(d)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        try:
            if "task" in d:
                d["task"] = TaskConfig.from_dict(d["task"])
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "hyperparams" in d:
                d["hyperparams"] = Hyperparams.from_dict(d["hyperparams"])
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
        return cls(**d)

    def with_overrides(self, seed=None, alpha=None, output_dir=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seeds=[int(seed)])
        if alpha is not None:
            cfg = replace(cfg, alpha=float(alpha))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        return cfg

    def output_path(self):
        return Path(self.output_dir or os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a mapping")
    return ExperimentConfig.from_dict(data)
