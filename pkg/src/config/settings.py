"""Configuration settings for the gang-of-bandits harness."""

import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.agents.agent_factory import PolicySpec
from src.config.constants import (
    CG_REL_TOL_KEY, DATA_DIR_KEY, DEFAULT_CANDIDATES, DEFAULT_CG_REL_TOL,
    DEFAULT_DATA_DIR, DEFAULT_DIMENSION, DEFAULT_KRONECKER_SEED,
    DEFAULT_KRONECKER_SPARSITY, DEFAULT_LAMBDA_GEN, DEFAULT_LOG_LEVEL,
    DEFAULT_OUTPUT_DIR, DEFAULT_ROUNDS, DEFAULT_SEED, DEFAULT_SEED_COUNT,
    DEFAULT_SIGMA, DEFAULT_SWEEP_MAX_WARMUP, DEFAULT_VALIDATION_PREFIX,
    HETREC_LAYOUTS, LOG_LEVEL_KEY,
    OUTPUT_DIR_KEY, SEED_KEY,
)
from src.utils.exceptions import ConfigError

# Load environment variables
load_dotenv()

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def get_output_dir() -> str:
    """Get the output directory from environment variables."""
    return os.getenv(OUTPUT_DIR_KEY, DEFAULT_OUTPUT_DIR)


def get_data_dir() -> str:
    """Get the dataset root directory from environment variables."""
    return os.getenv(DATA_DIR_KEY, DEFAULT_DATA_DIR)


def get_log_level() -> str:
    """Get the log level name from environment variables."""
    level = os.getenv(LOG_LEVEL_KEY, DEFAULT_LOG_LEVEL).upper()
    if level not in LOG_LEVELS:
        raise ConfigError(f"{LOG_LEVEL_KEY} must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    return level


def get_default_seed() -> int:
    """Get the base seed used when the config does not list seeds."""
    raw = os.getenv(SEED_KEY, str(DEFAULT_SEED))
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_KEY} must be an integer, got {raw!r}")
    if seed < 0:
        raise ConfigError(f"{SEED_KEY} must be non-negative, got {seed}")
    return seed


def get_cg_rel_tol() -> float:
    """Get the default conjugate-gradient relative tolerance."""
    raw = os.getenv(CG_REL_TOL_KEY)
    if raw is None:
        return DEFAULT_CG_REL_TOL
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{CG_REL_TOL_KEY} must be a number, got {raw!r}")
    if not value > 0:
        raise ConfigError(f"{CG_REL_TOL_KEY} must be positive, got {value}")
    return value


def _default_seeds() -> List[int]:
    base = get_default_seed()
    return list(range(base, base + DEFAULT_SEED_COUNT))


class EnvironmentConfig(BaseModel):
    """Round generator settings: a synthetic planted environment or a HetRec directory."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "dataset"] = "synthetic"
    n: int = Field(128, ge=1)
    d: int = Field(DEFAULT_DIMENSION, ge=1)
    candidates: int = Field(DEFAULT_CANDIDATES, ge=1)
    sigma: float = Field(DEFAULT_SIGMA, ge=0)
    lambda_gen: float = Field(DEFAULT_LAMBDA_GEN, gt=0)
    planted: bool = True
    graph: Literal["kronecker", "erdos_renyi", "empty", "file"] = "kronecker"
    kronecker_seed: List[List[float]] = Field(default_factory=lambda: [list(r) for r in DEFAULT_KRONECKER_SEED])
    sparsity: Optional[float] = Field(DEFAULT_KRONECKER_SPARSITY, gt=0, le=1)
    edge_probability: Optional[float] = Field(None, ge=0, le=1)
    graph_file: Optional[str] = None
    data_dir: Optional[str] = None
    layout: str = "lastfm"
    reduction: Literal["random_projection", "pca"] = "random_projection"
    on_dangling: Literal["error", "drop"] = "error"

    @field_validator("layout")
    @classmethod
    def _known_layout(cls, value: str) -> str:
        if value not in HETREC_LAYOUTS:
            raise ValueError(f"layout must be one of {HETREC_LAYOUTS}")
        return value

    @model_validator(mode="after")
    def _check_sources(self) -> "EnvironmentConfig":
        if self.kind == "synthetic" and self.graph == "kronecker":
            power = math.log2(self.n)
            if self.n < 2 or power != int(power):
                raise ValueError(f"kronecker graph needs n to be a power of two >= 2, got {self.n}")
        if self.kind == "synthetic" and self.graph == "file" and not self.graph_file:
            raise ValueError("graph = 'file' requires graph_file")
        if self.kind == "dataset" and not self.data_dir:
            self.data_dir = str(Path(get_data_dir()) / self.layout)
        return self


class SweepConfig(BaseModel):
    """Timing sweep over user count (and optionally dimension)."""
    model_config = ConfigDict(extra="forbid")

    n_values: List[int] = Field(default_factory=lambda: [1024, 2048, 4096, 8192])
    d: int = Field(DEFAULT_DIMENSION, ge=1)
    d_values: List[int] = Field(default_factory=list)
    fixed_n: int = Field(1024, ge=2)
    sparsity: float = Field(DEFAULT_KRONECKER_SPARSITY, gt=0, le=1)
    rounds_per_node: float = Field(1.0, ge=0)
    max_warmup_rounds: int = Field(DEFAULT_SWEEP_MAX_WARMUP, ge=0)
    timed_rounds: int = Field(200, ge=1)
    policies: List[str] = Field(default_factory=lambda: ["G-TS"])

    @field_validator("n_values")
    @classmethod
    def _powers_of_two(cls, values: List[int]) -> List[int]:
        for n in values:
            if n < 2 or n & (n - 1):
                raise ValueError(f"sweep n values must be powers of two >= 2, got {n}")
        return values


class ExperimentConfig(BaseModel):
    """Full experiment: environment, policies, protocol lengths and seeds."""
    model_config = ConfigDict(extra="forbid")

    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    policies: List[PolicySpec] = Field(default_factory=lambda: [PolicySpec(kind="G-TS")])
    rounds: int = Field(DEFAULT_ROUNDS, ge=1)
    validation_prefix: int = Field(DEFAULT_VALIDATION_PREFIX, ge=0)
    seeds: List[int] = Field(default_factory=_default_seeds)
    log_every: int = Field(1, ge=1)
    output_dir: str = Field(default_factory=get_output_dir)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _check_protocol(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if any(seed < 0 for seed in self.seeds):
            raise ValueError("seeds must be non-negative")
        if self.validation_prefix >= self.rounds:
            raise ValueError(
                f"validation_prefix ({self.validation_prefix}) must be smaller than rounds ({self.rounds})"
            )
        if not self.policies:
            raise ValueError("policies must not be empty")
        labels = [spec.label for spec in self.policies]
        if len(set(labels)) != len(labels):
            raise ValueError(f"policy labels must be unique, got {labels}")
        return self


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def build_experiment_config(data: dict) -> ExperimentConfig:
    """
    Validate a raw mapping into an ExperimentConfig.

    Args:
        data: Parsed config mapping

    Returns:
        ExperimentConfig: Validated config

    Raises:
        ConfigError: Naming every invalid field
    """
    data = dict(data)
    data.setdefault("policies", [{"kind": "G-TS"}])
    rel_tol = get_cg_rel_tol()
    policies = []
    for entry in data["policies"]:
        entry = dict(entry) if isinstance(entry, dict) else entry
        if isinstance(entry, dict):
            entry.setdefault("cg_rel_tol", rel_tol)
        policies.append(entry)
    data["policies"] = policies
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {_format_validation_error(e)}") from e


def load_experiment_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    Load an experiment config from a TOML file, or the defaults when no path is given.

    Args:
        path: Path to the TOML file

    Returns:
        ExperimentConfig: Validated config

    Raises:
        ConfigError: If the file is missing, unparsable or invalid
    """
    if path is None:
        return build_experiment_config({})
    path = Path(path)
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return build_experiment_config(data)


def apply_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    policies: Optional[Sequence[str]] = None,
    rounds: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """
    Apply CLI overrides on top of a loaded config.

    --policy keeps the file's hyperparameters for kinds the file already lists and
    uses defaults otherwise; --t clamps the validation prefix to T - 1.

    Args:
        config: Loaded config
        seed: Replaces the seed list with this single seed
        policies: Replaces the policy list
        rounds: Replaces T
        output_dir: Replaces the output directory

    Returns:
        ExperimentConfig: New validated config
    """
    data = config.model_dump(by_alias=True)
    if seed is not None:
        data["seeds"] = [seed]
    if policies:
        known = {spec.kind: spec.model_dump(by_alias=True) for spec in config.policies}
        data["policies"] = [known.get(kind, {"kind": kind}) for kind in policies]
    if rounds is not None:
        data["rounds"] = rounds
        data["validation_prefix"] = min(data["validation_prefix"], max(rounds - 1, 0))
    if output_dir is not None:
        data["output_dir"] = output_dir
    return build_experiment_config(data)


def parse_policy_list(raw: str) -> Tuple[str, ...]:
    """Split a comma-separated --policy value."""
    kinds = tuple(part.strip() for part in raw.split(",") if part.strip())
    if not kinds:
        raise ConfigError("--policy needs at least one policy kind")
    return kinds
