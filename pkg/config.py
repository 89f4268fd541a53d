"""
(©) EDQ Lab

This file holds all the configuration for the laboratory.

- It uses python-dotenv to load environment variables from a .env file.
- Environment variables provide the defaults (hyperparameters, logging, jobs).
- Experiment configs are JSON files parsed into `ExperimentConfig`; unknown keys are rejected.
"""

import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from logging.handlers import RotatingFileHandler
from pathlib import Path

import psutil
from dotenv import load_dotenv

from edq.errors import ConfigError

# Load environment variables from .env file
load_dotenv()

# --- Helper Functions for Safe Configuration Loading ---

def get_env_var(name: str, default=None, cast=None):
    """
    `os.environ[name]` passed through `cast` (int, float, ...), or `default` when unset.

    A value that does not parse is logged as critical and exits with status 1.
    """
    value = os.environ.get(name)
    if value is None:
        return default
    if cast is None:
        return value
    try:
        return cast(value)
    except ValueError:
        logging.critical(f"FATAL ERROR: Env var '{name}' must parse as {cast.__name__}, but got '{value}'.")
        sys.exit(1)

def get_bool_env_var(name: str, default: bool = False) -> bool:
    """True for 'true', '1', 'yes' or 'on' in any case; `default` when unset."""
    value = os.environ.get(name)
    if value is None:
        return default
    return value.strip().lower() in ("true", "1", "yes", "on")

def get_int_list_env_var(name: str, default: str) -> tuple:
    """Reads a comma separated list of positive integers, e.g. '64,64'."""
    raw = get_env_var(name, default=default)
    try:
        sizes = tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        logging.critical(f"FATAL ERROR: Env var '{name}' must be a comma separated list of integers, but got '{raw}'.")
        sys.exit(1)
    if not sizes or any(size <= 0 for size in sizes):
        logging.critical(f"FATAL ERROR: Env var '{name}' must list positive integers, but got '{raw}'.")
        sys.exit(1)
    return sizes

# ======================================================================================
#                               *** APPROXIMATOR DEFAULTS ***
#          Desk-scale Q-function hyperparameters. Experiment configs may override.
# ======================================================================================

HIDDEN_SIZES = get_int_list_env_var("EDQ_HIDDEN_SIZES", default="64,64")
ACTIVATION = get_env_var("EDQ_ACTIVATION", default="tanh")
STEP_SIZE = get_env_var("EDQ_STEP_SIZE", default=1e-3, cast=float)
MOMENTUM = get_env_var("EDQ_MOMENTUM", default=0.0, cast=float)
TAU = get_env_var("EDQ_TAU", default=0.01, cast=float)
HISTORY_K = get_env_var("EDQ_HISTORY_K", default=16, cast=int) # Last-K event slots in the featurizer
TIME_DIM = get_env_var("EDQ_TIME_DIM", default=16, cast=int)
TIME_BASE = get_env_var("EDQ_TIME_BASE", default=1e5, cast=float)

# ======================================================================================
#                               *** TRAINING & EVALUATION ***
# ======================================================================================

BATCH_SIZE = get_env_var("EDQ_BATCH_SIZE", default=1, cast=int)
FQE_STEP = get_env_var("EDQ_FQE_STEP", default=1.0, cast=float) # Discretization step h
TEST_SIZE = get_env_var("EDQ_TEST_SIZE", default=1000, cast=int) # Trajectories per test set
LOG_EVERY = get_env_var("EDQ_LOG_EVERY", default=1000, cast=int)
OUTPUT_DIR = get_env_var("EDQ_OUTPUT_DIR", default="runs")
STRICT_SEEDS = get_bool_env_var("EDQ_STRICT_SEEDS", default=False) # Refuse aggregates over fewer than 3 seeds

# --- Performance ---
JOBS = get_env_var("EDQ_JOBS", default=psutil.cpu_count(logical=False) or 1, cast=int)

# ======================================================================================
#                                *** LOGGING SETUP ***
# ======================================================================================

LOG_FILE_NAME = get_env_var("EDQ_LOG_FILE", default="edq_lab.log")
LOG_LEVEL = get_env_var("EDQ_LOG_LEVEL", default="INFO").upper()

_handlers = [logging.StreamHandler(sys.stderr)] # stdout carries command results
if LOG_FILE_NAME:
    _handlers.insert(0, RotatingFileHandler(
        LOG_FILE_NAME,
        maxBytes=50_000_000,  # 50 MB
        backupCount=10
    ))

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="[%(asctime)s - %(levelname)s] - %(name)s - %(message)s",
    datefmt='%d-%b-%y %H:%M:%S',
    handlers=_handlers
)

def LOGGER(name: str) -> logging.Logger:
    """A helper function to get a logger instance for any module."""
    return logging.getLogger(name)

# ======================================================================================
#                              *** EXPERIMENT CONFIG ***
#                  One JSON file per experiment; see presets/ and settings.json
# ======================================================================================

SIMULATOR_PRESETS = ("failure-long", "failure-short", "tumor", "oracle")
ESTIMATORS = ("edq", "fqe", "erm", "edq-tabular")
TIME_SAMPLERS = ("uniform", "active", "events")


def _build(cls, data, path: str):
    """Builds dataclass `cls` from a dict, rejecting unknown keys with their dotted path."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be an object, got {type(data).__name__}.")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        dotted = ", ".join(f"{path}.{key}" if path else key for key in unknown)
        raise ConfigError(f"Unknown config key(s): {dotted}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get((cls.__name__, name))
        child_path = f"{path}.{name}" if path else name
        if nested is not None:
            if isinstance(value, list):
                kwargs[name] = tuple(_build(nested, item, f"{child_path}[{i}]") for i, item in enumerate(value))
            else:
                kwargs[name] = _build(nested, value, child_path)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid '{path or 'config'}': {e}") from e


@dataclass(frozen=True)
class SimulatorSection:
    preset: str = "failure-short"
    params: dict = field(default_factory=dict) # Overrides on top of the preset's parameters
    fixture: str = "" # Oracle preset only: path to a discrete-process fixture

    def __post_init__(self):
        if self.preset not in SIMULATOR_PRESETS:
            raise ConfigError(f"simulator.preset must be one of {SIMULATOR_PRESETS}, got '{self.preset}'.")
        if not isinstance(self.params, dict):
            raise ConfigError("simulator.params must be an object.")


@dataclass(frozen=True)
class TrainSection:
    iterations: int = 20_000
    batch_size: int = BATCH_SIZE
    step_size: float = STEP_SIZE
    momentum: float = MOMENTUM
    tau: float = TAU
    time_sampling: str = "active"
    fqe_step: float = FQE_STEP
    hidden_sizes: tuple = HIDDEN_SIZES
    activation: str = ACTIVATION
    output_scale: float = 1.0
    log_every: int = LOG_EVERY

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("train.iterations must be positive.")
        if self.batch_size <= 0:
            raise ConfigError("train.batch_size must be positive.")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("train.tau must lie in (0, 1].")
        if self.fqe_step <= 0:
            raise ConfigError("train.fqe_step must be positive.")
        if self.time_sampling not in TIME_SAMPLERS:
            raise ConfigError(f"train.time_sampling must be one of {TIME_SAMPLERS}.")
        if self.activation not in ("tanh", "softplus"):
            raise ConfigError("train.activation must be 'tanh' or 'softplus'.")


@dataclass(frozen=True)
class FeatureSection:
    history_k: int = HISTORY_K
    time_dim: int = TIME_DIM
    time_base: float = TIME_BASE
    mark_dim: int = 2
    mark_scale: float = 1.0
    count_scale: float = 1.0
    outcome_scale: float = 1.0

    def __post_init__(self):
        if self.time_dim <= 0 or self.time_dim % 2:
            raise ConfigError("features.time_dim must be a positive even integer.")
        if self.history_k < 0 or self.mark_dim <= 0:
            raise ConfigError("features.history_k must be >= 0 and features.mark_dim > 0.")


@dataclass(frozen=True)
class DataSection:
    n_train: int = 1000

    def __post_init__(self):
        if self.n_train < 0:
            raise ConfigError("data.n_train must be >= 0.")


@dataclass(frozen=True)
class SettingSection:
    observed: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvalSection:
    n_test: int = TEST_SIZE
    estimators: tuple = ("erm", "fqe", "edq")
    settings: tuple = ()

    def __post_init__(self):
        if self.n_test <= 0:
            raise ConfigError("eval.n_test must be positive.")
        bad = [name for name in self.estimators if name not in ESTIMATORS]
        if bad:
            raise ConfigError(f"eval.estimators has unknown entries {bad}.")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    simulator: SimulatorSection = field(default_factory=SimulatorSection)
    observed_policy: dict = field(default_factory=dict)
    target_policy: dict = field(default_factory=dict)
    estimator: str = "edq"
    train: TrainSection = field(default_factory=TrainSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: tuple = (0, 1, 2)
    output_dir: str = OUTPUT_DIR
    jobs: int = JOBS

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got '{self.estimator}'.")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed.")
        if any(not isinstance(seed, int) or seed < 0 for seed in self.seeds):
            raise ConfigError("seeds must be non-negative integers.")
        if self.jobs <= 0:
            raise ConfigError("jobs must be positive.")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hashable_dict(self) -> dict:
        """The config without run-location knobs; this is what `config_hash` covers."""
        data = self.to_dict()
        data.pop("output_dir", None)
        data.pop("jobs", None)
        return data


_NESTED = {
    ("ExperimentConfig", "simulator"): SimulatorSection,
    ("ExperimentConfig", "train"): TrainSection,
    ("ExperimentConfig", "features"): FeatureSection,
    ("ExperimentConfig", "data"): DataSection,
    ("ExperimentConfig", "eval"): EvalSection,
    ("EvalSection", "settings"): SettingSection,
}


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def parse_experiment_config(data: dict) -> ExperimentConfig:
    """Validates a raw dict against the experiment schema."""
    return _build(ExperimentConfig, data, "")


def load_experiment_config(path) -> ExperimentConfig:
    """Reads and validates a JSON experiment config."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    return parse_experiment_config(raw)


def config_hash(config: ExperimentConfig) -> str:
    """Content hash of everything in the config that changes results."""
    from helper_func import content_hash
    return content_hash(config.hashable_dict())
