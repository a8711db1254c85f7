# MIT License
#
# Copyright (c) 2024 AsGrad Lab contributors
# See LICENSE for the full license text.

"""Experiment configuration.

Values come from three layers, later ones winning: model defaults, a YAML
file (``experiment.yaml``), and command-line flags. The merged mapping is
validated by the pydantic models below; every problem is reported at once.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import Dataset, SynConfig, generate_synthetic, load_dataset, load_libsvm, split_points
from .engine import RunConfig, TimingModel
from .errors import ConfigurationError
from .schedulers import StrategySpec, parse_strategy

DEFAULT_GRID: List[float] = [0.005, 0.004, 0.003, 0.002, 0.001, 0.0005, 0.0001]
DEFAULT_CONFIG = Path("experiment.yaml")


class DatasetBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["synthetic", "libsvm", "binary"] = "synthetic"
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    n: int = Field(10, ge=1)
    m: int = Field(200, ge=1)
    d: Optional[int] = Field(None, ge=1)
    seed: int = 0
    path: Optional[Path] = None
    points: Optional[int] = Field(None, ge=1)
    require_both_labels: bool = False

    @model_validator(mode="after")
    def _path_for_files(self) -> "DatasetBlock":
        if self.source != "synthetic" and self.path is None:
            raise ValueError(f"dataset source {self.source!r} needs a path")
        return self


class TimingBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["fixed", "poisson", "normal", "uniform"] = "fixed"
    s: Optional[List[float]] = None

    @field_validator("s")
    @classmethod
    def _positive(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and any(v <= 0 for v in value):
            raise ValueError("per-worker speeds must be positive")
        return value


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetBlock = Field(default_factory=DatasetBlock)
    timing: TimingBlock = Field(default_factory=TimingBlock)
    strategy: str = "pure"
    gamma: Optional[float] = Field(None, gt=0)
    grid: List[float] = Field(default_factory=lambda: list(DEFAULT_GRID), min_length=1)
    T: int = Field(1000, ge=0)
    batch_size: Union[int, Literal["full"]] = "full"
    lam: float = Field(0.1, ge=0)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Path = Path("runs")
    snapshot_every: int = Field(1, ge=1)
    metrics_every: int = Field(1, ge=1)
    keep_gradients: bool = True

    @field_validator("strategy")
    @classmethod
    def _strategy_grammar(cls, value: str) -> str:
        return parse_strategy(value).label()

    @field_validator("grid")
    @classmethod
    def _grid_positive(cls, value: List[float]) -> List[float]:
        if any(g <= 0 for g in value):
            raise ValueError("grid stepsizes must be positive")
        return value

    @field_validator("batch_size")
    @classmethod
    def _batch_positive(cls, value: Union[int, str]) -> Union[int, str]:
        if isinstance(value, int) and value < 1:
            raise ValueError("batch_size must be >= 1 or 'full'")
        return value

    @property
    def strategy_spec(self) -> StrategySpec:
        return parse_strategy(self.strategy)


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Apply ``{"dataset.alpha": 1.0, "T": 10}``-style overrides; ``None`` values are skipped."""
    merged = {key: (dict(value) if isinstance(value, dict) else value) for key, value in base.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        target = merged
        for parent in parents:
            target = target.setdefault(parent, {})
        target[leaf] = value
    return merged


def format_validation_errors(exc: ValidationError) -> List[str]:
    return [
        f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}"
        for err in exc.errors()
    ]


def load_experiment_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Read ``path`` (if given), apply ``overrides`` and validate.

    Raises
    ------
    ConfigurationError
        For unreadable files, malformed YAML or failed validation.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with Path(path).open("r", encoding="utf-8") as handle:
                data = yaml.safe_load(handle) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(_merge(data, overrides or {}))
    except ValidationError as exc:
        raise ConfigurationError(
            "invalid configuration:\n  " + "\n  ".join(format_validation_errors(exc))
        ) from exc


def build_dataset(block: DatasetBlock) -> Dataset:
    if block.source == "synthetic":
        dataset = generate_synthetic(
            SynConfig(
                alpha=block.alpha,
                beta=block.beta,
                n=block.n,
                m=block.m,
                d=block.d or 300,
                seed=block.seed,
                require_both_labels=block.require_both_labels,
            )
        )
    elif block.source == "libsvm":
        dataset = load_libsvm(block.path, block.n, block.d)
    else:
        dataset = load_dataset(block.path)
    if block.points is not None:
        dataset = split_points(dataset, block.points)
    return dataset


def to_run_config(cfg: ExperimentConfig, dataset: Dataset, gamma: float, seed: int) -> RunConfig:
    if cfg.timing.s is not None:
        timing = TimingModel(cfg.timing.kind, tuple(cfg.timing.s))
    else:
        timing = TimingModel.default(cfg.timing.kind, dataset.n)
    return RunConfig(
        dataset=dataset,
        strategy=cfg.strategy_spec,
        gamma=gamma,
        T=cfg.T,
        batch_size=None if cfg.batch_size == "full" else int(cfg.batch_size),
        timing=timing,
        seed=seed,
        snapshot_every=cfg.snapshot_every,
        lam=cfg.lam,
        metrics_every=cfg.metrics_every,
        keep_gradients=cfg.keep_gradients,
    )


def config_hash(cfg: ExperimentConfig, **extra: Any) -> str:
    """Short stable digest of a config plus run-specific values (gamma, seed, ...)."""
    payload = cfg.model_dump(mode="json", exclude={"output_dir", "grid", "seeds"})
    payload.update({key: value for key, value in extra.items()})
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


class SweepSettings:
    """Environment-driven settings for sweeps."""

    def __init__(self) -> None:
        raw = os.getenv("ASGRAD_THREADS")
        default = os.cpu_count() or 1
        try:
            self.threads = max(1, int(raw)) if raw else default
        except ValueError as exc:
            raise ConfigurationError(f"ASGRAD_THREADS must be an integer, got {raw!r}") from exc
