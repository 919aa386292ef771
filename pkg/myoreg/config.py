"""
Configuration models.

Defaults are the standard training protocol: 5x256 sine layers with omega=30,
Adam at 1e-5, 10,000 points per epoch, 2000 epochs for the first pair and 1000
for every warm-started pair after it, lambda=0.05 and tau=10.
"""

import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

THREADS_ENV = "MYOREG_THREADS"


class RegistrationMode(str, Enum):
    SEQUENTIAL = "sequential"
    NONSEQUENTIAL = "nonsequential"


class LossWeights(BaseModel):
    """Weights of the training objective."""

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    alpha: float = Field(0.8, ge=0.0, le=1.0, description="SDF weight; 1 - alpha goes to CT")
    lam: float = Field(0.05, ge=0.0, alias="lambda", description="Jacobian regularizer weight")
    tau: float = Field(10.0, gt=0.0, description="clip value of the Jacobian penalty")
    epsilon: float = Field(1e-8, gt=0.0, description="NCC variance guard")


class RegConfig(BaseModel):
    """Every hyperparameter of a cycle registration run."""

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    alpha: float = Field(0.8, ge=0.0, le=1.0)
    lam: float = Field(0.05, ge=0.0, alias="lambda")
    tau: float = Field(10.0, gt=0.0)
    epsilon: float = Field(1e-8, gt=0.0)
    epochs_first: int = Field(2000, ge=1)
    epochs_rest: int = Field(1000, ge=1)
    batch_size: int = Field(10_000, ge=2)
    learning_rate: float = Field(1e-5, gt=0.0)
    hidden_layers: int = Field(5, ge=1)
    width: int = Field(256, ge=1)
    omega: float = Field(30.0, gt=0.0)
    dilation_mm: float = Field(10.0, ge=0.0)
    seed: int = 0
    mode: RegistrationMode = RegistrationMode.SEQUENTIAL
    precision: Literal["float32", "float64"] = "float32"

    @property
    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, lam=self.lam, tau=self.tau, epsilon=self.epsilon)

    def echo(self) -> Dict[str, Any]:
        """JSON-ready dump used in CSV comment lines and checkpoint headers."""
        return self.model_dump(mode="json", by_alias=True)


def build_reg_config(
    config_file: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None
) -> RegConfig:
    """Merge built-in defaults < YAML file < explicit overrides into a RegConfig.

    Override entries whose value is None are ignored so click options can be
    passed through unconditionally.
    """
    values: Dict[str, Any] = {}
    if config_file is not None:
        try:
            loaded = yaml.safe_load(Path(config_file).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config file {config_file}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_file} must hold a mapping")
        values.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return RegConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(describe_validation_error(e)) from e


def describe_validation_error(error: ValidationError) -> str:
    """One line per problem, each naming the offending key."""
    lines = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{key}: {item['msg']}")
    return "invalid configuration: " + "; ".join(lines)


def thread_count() -> int:
    """Worker count for parallel evaluation, from MYOREG_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads
