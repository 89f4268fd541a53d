"""
(©) EDQ Lab

This plugin handles the `evaluate` command.
- Without `--checkpoint`: runs the estimator grid over the config's policy settings and seeds.
- With `--checkpoint`: scores that trained model on target-policy test sets, one per seed.
- Writes results.csv (per seed) and aggregate.csv (mean and seed standard error).
"""

import logging

import config as config_module
from config import config_hash
from database.database import load_checkpoint, write_table
from edq import evaluation, oracle, simulators
from edq.approximator import TabularQ, q_from_checkpoint
from edq.errors import ArtifactError, ConfigError
from edq.estimators import Predictor
from helper_func import stream
from lab import EXIT_OK, Lab
from plugins import load_fixture, run_dir, train_config

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
AGGREGATE_FILE = "aggregate.csv"

EVALUATE_ARGUMENTS = (
    (("--checkpoint",), {"default": None, "help": "Score this checkpoint instead of training a grid."}),
)


def grid_settings(experiment) -> list:
    """The config's (observed, target) pairs crossed with its estimators."""
    pairs = [(s.observed, s.target) for s in experiment.eval.settings]
    if not pairs:
        pairs = [(experiment.observed_policy, experiment.target_policy)]
    return [
        evaluation.Setting(dict(obs), dict(target), estimator)
        for obs, target in pairs
        for estimator in experiment.eval.estimators
    ]


def score_checkpoint(experiment, payload: dict) -> list:
    q = q_from_checkpoint(payload)
    estimator = payload.get("estimator", "edq")
    preset = experiment.simulator.preset

    if isinstance(q, TabularQ):
        # Scored against the exact values; the same for every seed.
        proc, _ = load_fixture(experiment)
        truth = oracle.target_values(proc)
        keys = [h for h in truth.keys() if len(h) < proc.horizon]
        value = evaluation.normalized_rmse([q.value(h) for h in keys], [truth.value(h) for h in keys])
        return [evaluation.ResultRow(estimator, "table", "table", seed, value, len(keys)) for seed in experiment.seeds]

    if preset == "oracle":
        raise ConfigError("A point-process checkpoint cannot be scored on the 'oracle' preset.")
    params = simulators.preset_params(preset, experiment.simulator.params)
    obs_label = simulators.describe_policy(preset, experiment.observed_policy, params)
    int_label = simulators.describe_policy(preset, experiment.target_policy, params)
    source = simulators.build_source(preset, experiment.simulator.params, experiment.target_policy)
    predictor = Predictor(estimator, q)
    rows = []
    for seed in experiment.seeds:
        test_set = evaluation.build_test_set(source, experiment.eval.n_test, stream(seed, "test", int_label))
        value = evaluation.score(predictor, test_set)
        logger.info(f"{estimator} {obs_label}->{int_label} seed {seed}: nrmse={value:.4f}")
        rows.append(evaluation.ResultRow(estimator, obs_label, int_label, seed, value, len(test_set)))
    return rows


@Lab.on_command("evaluate", help="Evaluate estimators by normalized RMSE on target-policy test sets.",
                arguments=EVALUATE_ARGUMENTS)
def evaluate(lab: Lab, args) -> int:
    experiment = lab.load_experiment(args)
    out = run_dir(experiment, args.out)
    digest = config_hash(experiment)

    if args.checkpoint:
        payload = load_checkpoint(args.checkpoint)
        if payload.get("config_hash") != digest:
            raise ArtifactError(
                f"Checkpoint was trained under config {payload.get('config_hash')}, current config is {digest}",
                args.checkpoint,
            )
        rows = score_checkpoint(experiment, payload)
        reports = evaluation.aggregate(rows, experiment.eval.n_test, strict=config_module.STRICT_SEEDS)
    else:
        rows, reports = evaluation.run_grid(
            experiment.simulator.preset,
            experiment.simulator.params,
            grid_settings(experiment),
            experiment.seeds,
            train_config(experiment, experiment.seeds[0]),
            experiment.data.n_train,
            experiment.eval.n_test,
            jobs=experiment.jobs,
            strict=config_module.STRICT_SEEDS,
        )

    write_table(out / RESULTS_FILE, evaluation.results_csv(rows), digest)
    aggregate_text = evaluation.aggregate_csv(reports)
    write_table(out / AGGREGATE_FILE, aggregate_text, digest)
    print(aggregate_text, end="")
    return EXIT_OK
