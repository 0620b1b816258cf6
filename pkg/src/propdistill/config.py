"""Run configuration: file < environment < command-line flags."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

ENV_PREFIX = "PROPDISTILL_"

LossName = Literal["plain", "invkd", "pnd", "pnd_fix", "conv"]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    data: str | None = None
    scenario: Literal["transductive", "production"] = "transductive"
    teacher: Literal["sage", "appnp"] = "sage"
    teacher_dir: str | None = None
    loss: LossName = "plain"
    alpha: float = Field(0.0, ge=0.0, le=1.0)
    gamma: float = Field(0.9, gt=0.0, le=1.0)
    steps: int = Field(10, ge=1)
    lr: float = Field(1e-2, gt=0.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    epochs: int = Field(500, ge=1)
    patience: int = Field(50, ge=1)
    hidden: int = Field(128, ge=1)
    batch_size: int | None = Field(None, ge=1)
    kl_reverse: bool = False
    ind_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    per_class_train: int = Field(20, ge=1)
    per_class_val: int = Field(30, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0])
    gammas: list[float] = Field(default_factory=lambda: [0.1, 0.9])
    steps_grid: list[int] = Field(default_factory=lambda: [1, 10, 50])
    losses: list[LossName] = Field(default_factory=lambda: ["pnd"])
    threads: int = Field(1, ge=1)
    out: str = "runs"

    @field_validator("loss", mode="before")
    @classmethod
    def _dash_to_underscore(cls, v):
        return v.replace("-", "_") if isinstance(v, str) else v

    @field_validator("losses", mode="before")
    @classmethod
    def _dash_list(cls, v):
        if isinstance(v, str):
            v = v.split(",")
        return [s.strip().replace("-", "_") if isinstance(s, str) else s for s in v]

    @field_validator("seeds", "gammas", "steps_grid", mode="before")
    @classmethod
    def _csv_list(cls, v):
        return [s for s in v.split(",") if s.strip()] if isinstance(v, str) else v


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    doc = yaml.safe_load(text) if text.strip() else {}
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return doc


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name in RunConfig.model_fields:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            raw = environ[key]
            try:
                out[name] = json.loads(raw)
            except json.JSONDecodeError:
                out[name] = raw
    return out


def resolve_config(path=None, flags: dict | None = None, environ=None) -> RunConfig:
    merged = read_config_file(path) if path else {}
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    return RunConfig(**merged)


def write_resolved(cfg: RunConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.json"
    path.write_text(cfg.model_dump_json(indent=2))
    return path
