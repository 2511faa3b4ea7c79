"""Run configuration: a YAML document with four flat sections.

    env:    which environment and its parameters
    train:  learning hyperparameters and the training mode
    eval:   greedy evaluation cadence
    run:    seeds and output cadences

Unknown keys are rejected. ``dump_config`` writes a snapshot that
``load_config`` reads back to an equal ``RunConfig``.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from der.errors import ConfigError

logger = logging.getLogger(__name__)

TrainMode = Literal["der", "divide-only", "joint-baseline"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvConfig(_Section):
    name: Literal["matrix_game", "switch_harvest"] = "matrix_game"
    payoff: Optional[list[list[float]]] = None
    layout: Optional[list[str]] = None
    episode_limit: int = Field(50, ge=1)
    random_starts: bool = False


class TrainConfig(_Section):
    gamma: float = Field(0.99, ge=0.0, lt=1.0)
    t_max: int = Field(200_000, ge=1)
    batch_size: int = Field(32, ge=1)
    target_update_period: int = Field(200, ge=1)
    buffer_capacity: int = Field(5000, ge=1)
    lr: float = Field(5e-4, gt=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    grad_clip: float = Field(10.0, ge=0.0)
    epsilon_start: float = Field(1.0, ge=0.0, le=1.0)
    epsilon_end: float = Field(0.05, ge=0.0, le=1.0)
    epsilon_anneal_steps: int = Field(50_000, ge=1)
    eta_start: float = Field(0.8, gt=0.0, le=1.0)
    eta_end: float = Field(1.0, gt=0.0, le=1.0)
    eta_proportion: float = Field(0.6, gt=0.0, le=1.0)
    fixed_eta: Optional[float] = Field(None, gt=0.0, le=1.0)
    alpha: float = Field(0.6, ge=0.0)
    priority_eps: float = Field(1e-6, gt=0.0)
    beta_start: float = Field(0.4, ge=0.0, le=1.0)
    beta_end: float = Field(1.0, ge=0.0, le=1.0)
    mixer: Literal["vdn", "monotonic"] = "monotonic"
    mode: TrainMode = "der"
    agent_hidden: list[int] = Field(default_factory=lambda: [64, 64], min_length=1)
    mixer_embed: int = Field(32, ge=1)
    mixer_update: bool = True
    joint_mixer_update: bool = False
    normalize_individual_loss: bool = False

    @model_validator(mode="after")
    def _ordered_ranges(self) -> "TrainConfig":
        if self.eta_start > self.eta_end:
            raise ValueError("eta_start must not exceed eta_end")
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        if any(width < 1 for width in self.agent_hidden):
            raise ValueError("agent_hidden widths must be positive")
        return self


class EvalConfig(_Section):
    episodes: int = Field(20, ge=1)
    interval: int = Field(1000, ge=1)


class RunSection(_Section):
    seeds: list[int] = Field(default_factory=lambda: [1])
    checkpoint_interval: int = Field(0, ge=0)
    replay_dump_interval: int = Field(0, ge=0)
    log_interval: int = Field(100, ge=1)


class RunConfig(_Section):
    env: EnvConfig = Field(default_factory=EnvConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    run: RunSection = Field(default_factory=RunSection)

    def with_mode(self, mode: TrainMode, fixed_eta: float | None = None) -> "RunConfig":
        train = self.train.model_copy(update={"mode": mode, "fixed_eta": fixed_eta})
        return self.model_copy(update={"train": train})


def parse_config(document: object, source: str = "<config>") -> RunConfig:
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError(f"{source}: top level must be a mapping of sections")
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"{source}: {key}: {first['msg']}") from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    config = parse_config(document, str(path))
    logger.debug("loaded config %s", path)
    return config


def dump_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(config.model_dump(mode="json"), handle, sort_keys=False)
    return path
