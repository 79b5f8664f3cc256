"""Shared pipeline configuration: defaults, config file, flag resolution.

Precedence is flag > config file > built-in default. Environment variables
are never consulted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .store import ValidationError

DEFAULT_ALPHA = 0.3
DEFAULT_RATIO = 0.5
DEFAULT_OVERSAMPLE_FACTOR = 4
DEFAULT_MC_RUNS_USED = 5
DEFAULT_CENTROID_RUN_INDEX = 1
DEFAULT_SEED = 0
DEFAULT_JOBS = 1


@dataclass
class PipelineConfig:
    alpha: float = DEFAULT_ALPHA
    ratio: float = DEFAULT_RATIO
    oversample_factor: int = DEFAULT_OVERSAMPLE_FACTOR
    mc_runs_used: int = DEFAULT_MC_RUNS_USED
    centroid_run_index: int = DEFAULT_CENTROID_RUN_INDEX
    seed: int = DEFAULT_SEED
    jobs: int = DEFAULT_JOBS
    real_dump: str | None = None
    synthetic_dump: str | None = None
    centroids: str | None = None
    manifest: str | None = None
    train_list: str | None = None
    epochs_dir: str | None = None
    out: str | None = None


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown config fields: {sorted(unknown)}")
    return PipelineConfig(**raw)


def resolve(flag_value, config_value, default):
    """flag > config file > default; flags left at None defer to the config."""
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    return default
