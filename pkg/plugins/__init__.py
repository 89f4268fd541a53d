"""
(©) EDQ Lab

Shared helpers for the command plugins: run directories, bundled file lookup and
translation of experiment config sections into library objects.
"""

from pathlib import Path

from database.database import read_json
from edq.approximator import FeatureConfig
from edq.estimators import TrainConfig
from edq.oracle import DiscreteProcess

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_FIXTURE = "presets/oracle-fixture.json"


def resolve_path(path) -> Path:
    """A path as given when it exists, otherwise relative to the repository root (bundled presets)."""
    path = Path(path)
    if path.exists() or path.is_absolute():
        return path
    bundled = REPO_ROOT / path
    return bundled if bundled.exists() else path


def run_dir(config, out: str | None = None) -> Path:
    return Path(out) if out else Path(config.output_dir) / config.name


def feature_config(config) -> FeatureConfig:
    f = config.features
    return FeatureConfig(
        history_k=f.history_k,
        time_dim=f.time_dim,
        time_base=f.time_base,
        mark_dim=f.mark_dim,
        mark_scale=f.mark_scale,
        count_scale=f.count_scale,
        outcome_scale=f.outcome_scale,
    )


def train_config(config, seed: int) -> TrainConfig:
    t = config.train
    return TrainConfig(
        iterations=t.iterations,
        batch_size=t.batch_size,
        step_size=t.step_size,
        momentum=t.momentum,
        tau=t.tau,
        time_sampling=t.time_sampling,
        fqe_step=t.fqe_step,
        seed=seed,
        hidden_sizes=tuple(t.hidden_sizes),
        activation=t.activation,
        output_scale=t.output_scale,
        log_every=t.log_every,
        features=feature_config(config),
    )


def load_fixture(config) -> tuple:
    """(DiscreteProcess, expected values dict) of the oracle preset's fixture file."""
    path = resolve_path(config.simulator.fixture or DEFAULT_FIXTURE)
    data = read_json(path)
    return DiscreteProcess.from_dict(data["process"] if "process" in data else data), data.get("expected", {})
