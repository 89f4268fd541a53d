"""
(©) EDQ Lab

Off-policy evaluation protocol.

- Test sets are drawn under the TARGET policy; every event time of every trajectory
  gives one labelled prefix whose label is that trajectory's outcome.
- Scores are RMSE divided by the population standard deviation of the test labels,
  so predicting the label mean scores exactly 1.0.
- Grids run one job per (policy pair, seed); each job trains every estimator on the
  same observed dataset and scores it on the same test set.
"""

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from edq import simulators
from edq.core_process import Trajectory
from edq.errors import ConfigError
from edq.estimators import Dataset, TrainConfig, fit
from helper_func import stream

logger = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
RESULTS_COLUMNS = ("estimator", "setting_obs", "setting_int", "seed", "nrmse", "n_prefixes")
AGGREGATE_COLUMNS = ("estimator", "setting_obs", "setting_int", "nrmse_mean", "nrmse_se", "n_seeds", "n_test",
                     "n_prefixes", "seeds")
MIN_SEEDS_FOR_SE = 3


@dataclass(frozen=True)
class LabeledPrefix:
    traj_id: int
    time: float
    history: Trajectory
    label: float


def build_test_set(source, n: int, rng) -> list:
    """One labelled prefix per event time of `n` trajectories sampled from `source`."""
    if n <= 0:
        raise ConfigError(f"Test set size must be positive, got {n}.")
    points = []
    for traj_id in range(n):
        traj, y = source.sample(rng)
        for event in traj.events:
            points.append(LabeledPrefix(traj_id, event.time, traj.history(event.time), float(y)))
    return points


def normalized_rmse(preds, labels) -> float:
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError(f"Predictions {preds.shape} and labels {labels.shape} must be equal-length vectors.")
    if len(labels) < 2:
        raise ValueError("Normalized RMSE needs at least two labels.")
    scale = float(np.std(labels))
    if scale == 0.0:
        raise ValueError("Labels are constant; normalized RMSE is undefined.")
    return float(np.sqrt(np.mean((preds - labels) ** 2)) / scale)


def score(predictor, test_set: list) -> float:
    """Normalized RMSE of a `Predictor` over a labelled test set."""
    preds = predictor.predict([(p.history, p.time) for p in test_set])
    return normalized_rmse(preds, [p.label for p in test_set])


# ======================================================================================
#                                   *** Result rows ***
# ======================================================================================

@dataclass(frozen=True)
class Setting:
    observed: dict
    target: dict
    estimator: str


@dataclass(frozen=True)
class ResultRow:
    estimator: str
    setting_obs: str
    setting_int: str
    seed: int
    nrmse: float
    n_prefixes: int


@dataclass(frozen=True)
class EvalReport:
    estimator: str
    setting_obs: str
    setting_int: str
    nrmse: float
    nrmse_se: float
    n_test: int
    n_prefixes: int
    seeds: tuple = field(default_factory=tuple)


def aggregate(rows, n_test: int, strict: bool = False) -> list:
    """
    Mean and standard error over seeds per (estimator, setting). With fewer than three
    seeds the standard error is NaN, or a ConfigError when `strict`.
    """
    groups: dict = {}
    for row in rows:
        groups.setdefault((row.estimator, row.setting_obs, row.setting_int), []).append(row)
    reports = []
    for (estimator, obs, target), members in groups.items():
        values = np.array([r.nrmse for r in members])
        if len(members) >= MIN_SEEDS_FOR_SE:
            se = float(np.std(values, ddof=1) / math.sqrt(len(values)))
        else:
            message = f"{estimator} {obs}->{target}: {len(members)} seed(s), standard error needs {MIN_SEEDS_FOR_SE}"
            if strict:
                raise ConfigError(message)
            logger.warning(message)
            se = math.nan
        reports.append(EvalReport(
            estimator=estimator,
            setting_obs=obs,
            setting_int=target,
            nrmse=float(np.mean(values)),
            nrmse_se=se,
            n_test=n_test,
            n_prefixes=int(round(float(np.mean([r.n_prefixes for r in members])))),
            seeds=tuple(r.seed for r in members),
        ))
    return reports


def _num(value: float) -> str:
    return "nan" if math.isnan(value) else repr(float(value))


def results_csv(rows) -> str:
    buffer = io.StringIO()
    buffer.write(f"# edq-results v{RESULTS_SCHEMA_VERSION}; nrmse = rmse / population sd of test labels\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RESULTS_COLUMNS)
    for r in rows:
        writer.writerow([r.estimator, r.setting_obs, r.setting_int, r.seed, _num(r.nrmse), r.n_prefixes])
    return buffer.getvalue()


def aggregate_csv(reports) -> str:
    buffer = io.StringIO()
    buffer.write(f"# edq-aggregate v{RESULTS_SCHEMA_VERSION}; nrmse_se is the standard error over seeds\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(AGGREGATE_COLUMNS)
    for r in reports:
        writer.writerow([r.estimator, r.setting_obs, r.setting_int, _num(r.nrmse), _num(r.nrmse_se), len(r.seeds),
                         r.n_test, r.n_prefixes, " ".join(str(s) for s in r.seeds)])
    return buffer.getvalue()


# ======================================================================================
#                                      *** Grid ***
# ======================================================================================

@dataclass(frozen=True)
class GridJob:
    preset: str
    sim_params: dict
    observed: dict
    target: dict
    estimators: tuple
    seed: int
    train: TrainConfig
    n_train: int
    n_test: int


def run_job(job: GridJob) -> list:
    """Trains every estimator of the job on one observed dataset and scores it on one test set."""
    params = simulators.preset_params(job.preset, job.sim_params)
    obs_label = simulators.describe_policy(job.preset, job.observed, params)
    int_label = simulators.describe_policy(job.preset, job.target, params)

    observed = simulators.build_source(job.preset, job.sim_params, job.observed)
    target_source = simulators.build_source(job.preset, job.sim_params, job.target)
    data = Dataset.sample(observed, job.n_train, stream(job.seed, "data", obs_label))
    test_set = build_test_set(target_source, job.n_test, stream(job.seed, "test", int_label))
    logger.info(f"Grid cell {obs_label}->{int_label} seed {job.seed}: {data.m} trajectories, {len(test_set)} test prefixes")

    rows = []
    cfg = replace(job.train, seed=job.seed)
    for estimator in job.estimators:
        result = fit(
            estimator, data, target_source.policy, cfg,
            rng=stream(job.seed, "train", estimator, obs_label, int_label),
            init_rng=stream(job.seed, "init", estimator),
        )
        value = score(result.predictor(), test_set)
        logger.info(f"  {estimator}: nrmse={value:.4f}")
        rows.append(ResultRow(estimator, obs_label, int_label, job.seed, value, len(test_set)))
    return rows


def grid_jobs(preset: str, sim_params: dict, settings, seeds, train: TrainConfig, n_train: int,
              n_test: int) -> list:
    """Groups settings by policy pair so estimators of one pair share data."""
    pairs: dict = {}
    for setting in settings:
        key = (tuple(sorted(setting.observed.items())), tuple(sorted(setting.target.items())))
        entry = pairs.setdefault(key, (setting.observed, setting.target, []))
        if setting.estimator not in entry[2]:
            entry[2].append(setting.estimator)
    return [
        GridJob(preset, dict(sim_params), dict(obs), dict(target), tuple(estimators), int(seed), train, n_train, n_test)
        for obs, target, estimators in pairs.values()
        for seed in seeds
    ]


def run_grid(preset: str, sim_params: dict, settings, seeds, train: TrainConfig, n_train: int, n_test: int,
             jobs: int = 1, strict: bool = False) -> tuple:
    """Returns (per-seed rows, aggregated reports); row order is independent of `jobs`."""
    if preset not in simulators.PRESETS:
        raise ConfigError(f"Grid evaluation needs a point-process preset, got '{preset}'.")
    bad = [s.estimator for s in settings if s.estimator not in ("edq", "fqe", "erm")]
    if bad:
        raise ConfigError(f"Estimators {sorted(set(bad))} cannot be evaluated on '{preset}'.")
    work = grid_jobs(preset, sim_params, settings, seeds, train, n_train, n_test)
    logger.info(f"Running {len(work)} grid job(s) with {jobs} worker(s)")
    if jobs <= 1 or len(work) <= 1:
        results = [run_job(job) for job in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_job, work))
    rows = [row for chunk in results for row in chunk]
    return rows, aggregate(rows, n_test, strict=strict)
