"""
Configuration models for the forecasting pipeline.
Validated with pydantic; loaded from a TOML file with CLI and environment overrides.
"""

import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from pfrp.errors import ConfigError

logger = logging.getLogger(__name__)

SERVING_HORIZONS = [96, 192, 336, 720]

# Day/week lags in samples for common sampling intervals
DEFAULT_LAGS = {
    "1h": [24, 168],
    "15min": [96, 672],
    "10min": [144, 1008],
}

# Split ratio, sampling interval, bank size K, top-k and reference periodicity score
DATASET_PRESETS: Dict[str, Dict[str, Any]] = {
    "traffic": {"split": (0.7, 0.1, 0.2), "freq": "1h", "bank_size": 4000, "top_k": 10, "periodicity": 0.3202},
    "electricity": {"split": (0.7, 0.1, 0.2), "freq": "1h", "bank_size": 1000, "top_k": 20, "periodicity": 0.1931},
    "weather": {"split": (0.7, 0.1, 0.2), "freq": "10min", "bank_size": 4000, "top_k": 20, "periodicity": None},
    "etth1": {"split": (0.6, 0.2, 0.2), "freq": "1h", "bank_size": 1000, "top_k": 50, "periodicity": None},
    "etth2": {"split": (0.6, 0.2, 0.2), "freq": "1h", "bank_size": 1000, "top_k": 50, "periodicity": None},
    "ettm1": {"split": (0.6, 0.2, 0.2), "freq": "15min", "bank_size": 3000, "top_k": 200, "periodicity": None},
    "ettm2": {"split": (0.6, 0.2, 0.2), "freq": "15min", "bank_size": 3000, "top_k": 100, "periodicity": None},
}


class SplitSpec(BaseModel):
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2

    model_config = {
        "frozen": True,
        "json_schema_extra": {
            "example": {"train_ratio": 0.6, "val_ratio": 0.2, "test_ratio": 0.2}
        }
    }

    @field_validator('train_ratio', 'val_ratio', 'test_ratio')
    @classmethod
    def validate_ratio(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f'ratio must lie strictly between 0 and 1, got {v}')
        return v

    @model_validator(mode='after')
    def validate_sum(self):
        total = self.train_ratio + self.val_ratio + self.test_ratio
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f'split ratios must sum to 1, got {total}')
        return self


class EncoderConfig(BaseModel):
    lookback: int = 96
    feature_dim: int = 128
    hidden_dims: List[int] = [256, 256]
    tau: float = 0.05
    batch_size: int = 256
    lr: float = 1e-3
    epochs: int = 10
    overlap_threshold: int = 48
    strategy: Literal["pcl", "cl", "pl"] = "pcl"
    seed: int = 0

    model_config = {
        "json_schema_extra": {
            "example": {"lookback": 96, "feature_dim": 128, "tau": 0.05, "batch_size": 256, "lr": 0.001}
        }
    }

    @field_validator('tau', 'lr')
    @classmethod
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError('must be positive')
        return v

    @field_validator('batch_size')
    @classmethod
    def validate_batch_size(cls, v):
        # anchor + positive + at least one negative
        if v < 3:
            raise ValueError('batch_size must be at least 3')
        return v

    @field_validator('lookback', 'feature_dim')
    @classmethod
    def validate_dim(cls, v):
        if v < 1:
            raise ValueError('dimension must be at least 1')
        return v

    @field_validator('epochs')
    @classmethod
    def validate_epochs(cls, v):
        if v < 0:
            raise ValueError('epochs must be non-negative')
        return v

    @model_validator(mode='after')
    def validate_overlap(self):
        if not 0 <= self.overlap_threshold <= self.lookback:
            raise ValueError('overlap_threshold must lie in [0, lookback]')
        return self


class BankConfig(BaseModel):
    size: int = 1000
    horizon: int = 720
    max_iter: int = 100
    restarts: int = 10
    store_raw_x: bool = False
    seed: int = 0

    @field_validator('size', 'horizon', 'max_iter', 'restarts')
    @classmethod
    def validate_count(cls, v):
        if v < 1:
            raise ValueError('must be at least 1')
        return v


class PfrpConfig(BaseModel):
    top_k: int = 10
    horizon: int = 96
    confidence_hidden: List[int] = [128]
    output_hidden: List[int] = [128]
    fusion_hidden: List[int] = [32]
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 256
    patience: int = 3
    retrieval: Literal["feature", "mse", "dtw", "pcc"] = "feature"
    local_kind: Literal["linear", "dlinear"] = "linear"
    kernel_size: int = 25
    no_confidence_gate: bool = False
    no_output_gate: bool = False
    no_local_model: bool = False
    pretrained_local: Optional[Path] = None
    seed: int = 0

    model_config = {
        "json_schema_extra": {
            "example": {"top_k": 10, "horizon": 96, "lr": 0.0001, "retrieval": "feature", "local_kind": "linear"}
        }
    }

    @field_validator('top_k', 'horizon', 'batch_size')
    @classmethod
    def validate_count(cls, v):
        if v < 1:
            raise ValueError('must be at least 1')
        return v

    @field_validator('lr')
    @classmethod
    def validate_lr(cls, v):
        if v <= 0:
            raise ValueError('lr must be positive')
        return v

    @field_validator('kernel_size')
    @classmethod
    def validate_kernel(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError('kernel_size must be a positive odd integer')
        return v


class PeriodicityConfig(BaseModel):
    lags: List[int] = [24, 168]
    bins: int = 20

    @field_validator('lags')
    @classmethod
    def validate_lags(cls, v):
        if not v or any(lag < 1 for lag in v):
            raise ValueError('lags must be a non-empty list of positive integers')
        return v

    @field_validator('bins')
    @classmethod
    def validate_bins(cls, v):
        if v < 2:
            raise ValueError('bins must be at least 2')
        return v


class DatasetConfig(BaseModel):
    path: Optional[Path] = None
    column: Optional[str] = None
    name: str = "series"
    preset: Optional[str] = None

    @field_validator('preset')
    @classmethod
    def validate_preset(cls, v):
        if v is not None and v.lower() not in DATASET_PRESETS:
            raise ValueError(f'unknown dataset preset "{v}"; choose one of {sorted(DATASET_PRESETS)}')
        return v.lower() if v else v


class RunConfig(BaseModel):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    lookback: int = 96
    horizons: List[int] = [96]
    split: SplitSpec = Field(default_factory=SplitSpec)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    bank: BankConfig = Field(default_factory=BankConfig)
    pfrp: PfrpConfig = Field(default_factory=PfrpConfig)
    periodicity: PeriodicityConfig = Field(default_factory=PeriodicityConfig)
    output_dir: Path = Path("runs/default")
    plot_indices: List[int] = []
    seed: int = 0

    @field_validator('horizons')
    @classmethod
    def validate_horizons(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError('horizons must be a non-empty list of positive integers')
        return v

    @model_validator(mode='after')
    def propagate_shared_settings(self):
        # Lookback and seed are shared by every stage unless a stage sets its own
        if 'lookback' not in self.encoder.model_fields_set:
            self.encoder.lookback = self.lookback
        if self.encoder.lookback != self.lookback:
            raise ValueError('encoder.lookback must equal lookback')
        for sub in (self.encoder, self.bank, self.pfrp):
            if 'seed' not in sub.model_fields_set:
                sub.seed = self.seed
        if max(self.horizons) > self.bank.horizon:
            raise ValueError(f'bank.horizon {self.bank.horizon} is shorter than horizon {max(self.horizons)}')
        if self.pfrp.top_k > self.bank.size:
            raise ValueError('pfrp.top_k must not exceed bank.size')
        return self

    def for_horizon(self, horizon):
        """Copy of this config with the stage-2 serving horizon set"""
        pfrp = self.pfrp.model_copy(update={"horizon": horizon})
        return self.model_copy(update={"pfrp": pfrp})


def _apply_preset(data):
    """Fill split, K, k and lags from a dataset preset where the file leaves them unset"""
    preset_name = (data.get("dataset") or {}).get("preset")
    if not preset_name:
        return data
    preset = DATASET_PRESETS.get(str(preset_name).lower())
    if preset is None:
        return data
    train, val, test = preset["split"]
    data.setdefault("split", {"train_ratio": train, "val_ratio": val, "test_ratio": test})
    data.setdefault("bank", {}).setdefault("size", preset["bank_size"])
    data.setdefault("pfrp", {}).setdefault("top_k", preset["top_k"])
    data.setdefault("periodicity", {}).setdefault("lags", DEFAULT_LAGS[preset["freq"]])
    return data


def _set_path(data, dotted_key, value):
    """Set a nested key such as 'pfrp.top_k' in a plain dict"""
    parts = dotted_key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_run_config(path=None, overrides=None):
    """Load a RunConfig from a TOML file, then apply overrides and environment variables"""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e

    for key, value in (overrides or {}).items():
        if value is not None:
            _set_path(data, key, value)

    env_seed = os.getenv("PFRP_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"PFRP_SEED must be an integer, got {env_seed!r}") from e
        logger.info("Seed overridden from PFRP_SEED: %s", env_seed)

    data = _apply_preset(data)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
