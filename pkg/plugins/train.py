"""
(©) EDQ Lab

This plugin handles the `train` command.
- Refuses datasets whose manifest does not match the current config.
- Trains the configured estimator (EDQ, discretized FQE, ERM or tabular EDQ).
- Writes a checkpoint and a diagnostics CSV; `--resume` continues from the checkpoint.
- Tabular EDQ runs on the oracle fixture and checks the exact fixed point in-run.
"""

import logging

from config import config_hash
from database.database import (
    check_dataset, load_checkpoint, read_dataset, read_diagnostics, save_checkpoint, write_diagnostics
)
from edq import oracle, simulators
from edq.approximator import (
    FeaturizedQ, TargetCopy, checkpoint_payload, decode_history_key, encode_history_key, q_from_checkpoint
)
from edq.core_process import EventKind
from edq.errors import ArtifactError, ConfigError, VerificationFailure
from edq.estimators import Dataset, DiagnosticRow, TrainResult, fit, train_edq_tabular
from helper_func import stream
from lab import EXIT_OK, Lab
from plugins import load_fixture, run_dir, train_config
from plugins.simulate import DATASET_FILE

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.json"
DIAGNOSTICS_FILE = "diagnostics.csv"
FIXED_POINT_TOLERANCE = 1e-9

TRAIN_ARGUMENTS = (
    (("--dataset",), {"default": None, "help": "Dataset file (default: <run dir>/dataset.csv)."}),
    (("--checkpoint",), {"default": None, "help": "Checkpoint file (default: <run dir>/checkpoint.json)."}),
    (("--resume",), {"action": "store_true", "help": "Continue training from the checkpoint."}),
)


def _resume_state(path, estimator: str, expected_hash: str, diagnostics_path, tau: float) -> TrainResult:
    payload = load_checkpoint(path)
    if payload.get("config_hash") != expected_hash:
        raise ArtifactError(f"Checkpoint was trained under config {payload.get('config_hash')}", path)
    if payload.get("estimator") != estimator:
        raise ArtifactError(f"Checkpoint holds a '{payload.get('estimator')}' model, not '{estimator}'", path)
    q = q_from_checkpoint(payload)
    target = None
    if isinstance(q, FeaturizedQ):
        target = TargetCopy(q, tau)
        if "target" in payload:
            target.model = FeaturizedQ.from_dict(payload["target"])
    rows = [DiagnosticRow(**row) for row in read_diagnostics(diagnostics_path)] if diagnostics_path.exists() else []
    visits = {decode_history_key(key): int(n) for key, n in payload.get("visits", {}).items()}
    return TrainResult(estimator, q, target, rows, [], int(payload.get("iterations", 0)), visits)


def _episodes(pairs, proc) -> list:
    episodes = []
    for i, (traj, _) in enumerate(pairs):
        history = oracle.history_from_trajectory(traj, null_action=0)
        rewards = [e.value for e in traj.events if e.kind is EventKind.OUTCOME]
        if len(history) != proc.horizon or len(rewards) != proc.horizon:
            raise ArtifactError(f"Trajectory {i} does not embed a complete {proc.horizon}-step episode")
        episodes.append((history, rewards))
    return episodes


def train_tabular(experiment, pairs, seed: int, resume: TrainResult | None) -> tuple:
    """Sampled tabular EDQ, then the exact sweep from the learned table checked against the oracle."""
    proc, expected = load_fixture(experiment)
    episodes = _episodes(pairs, proc)
    result = train_edq_tabular(
        proc, episodes, experiment.train.iterations,
        rng=stream(seed, "train", "edq-tabular", resume.iterations if resume else 0),
        q=resume.q if resume else None,
        log_every=experiment.train.log_every,
        visits=resume.visits if resume else None,
    )
    if resume:
        for row in result.diagnostics:
            row.iteration += resume.iterations
        result.diagnostics = resume.diagnostics + result.diagnostics
        result.iterations += resume.iterations

    fixed = oracle.edq_fixed_point(proc)
    swept = train_edq_tabular(proc, (), proc.horizon + 1, exact=True, q=result.q)
    checks = {
        "exact sweep vs fixed point": swept.q.max_abs_diff(fixed),
        "fixed point vs target enumeration": fixed.max_abs_diff(oracle.target_values(proc)),
    }
    if expected.get("q"):
        checks["fixed point vs fixture"] = max(
            abs(fixed.value(decode_history_key(key)) - float(value)) for key, value in expected["q"].items()
        )
    for name, gap in checks.items():
        logger.info(f"Fixed-point check, {name}: max gap {gap:.3e}")
    failed = {name: gap for name, gap in checks.items() if not gap <= FIXED_POINT_TOLERANCE}
    if failed:
        raise VerificationFailure(f"In-run fixed-point check failed: {failed}")
    sampled_gap = result.q.max_abs_diff(fixed)
    logger.info(f"Sampled tabular EDQ after {result.iterations} updates: L∞ gap to the fixed point {sampled_gap:.4g}")
    visits = {encode_history_key(key): n for key, n in result.visits.items()}
    return result, {"fixed_point_gap": sampled_gap, "visits": visits}


@Lab.on_command("train", help="Train an estimator on a simulated dataset.", arguments=TRAIN_ARGUMENTS)
def train(lab: Lab, args) -> int:
    experiment = lab.load_experiment(args)
    seed = experiment.seeds[0]
    out = run_dir(experiment, args.out)
    dataset_path = args.dataset or out / DATASET_FILE
    checkpoint_path = args.checkpoint or out / CHECKPOINT_FILE
    diagnostics_path = out / DIAGNOSTICS_FILE
    estimator = experiment.estimator
    preset = experiment.simulator.preset
    digest = config_hash(experiment)

    manifest = check_dataset(dataset_path, digest)
    pairs, _ = read_dataset(dataset_path)
    resume = None
    if args.resume:
        tau = experiment.train.tau
        resume = _resume_state(checkpoint_path, estimator, digest, diagnostics_path, tau)
        logger.info(f"Resuming {estimator} from iteration {resume.iterations}")

    if estimator == "edq-tabular":
        if preset != "oracle":
            raise ConfigError("estimator 'edq-tabular' needs the 'oracle' simulator preset.")
        result, extra = train_tabular(experiment, pairs, seed, resume)
    else:
        if preset == "oracle":
            raise ConfigError(f"estimator '{estimator}' needs a point-process preset, not 'oracle'.")
        params = simulators.preset_params(preset, experiment.simulator.params)
        target = simulators.build_policy(preset, params, experiment.target_policy)
        done = resume.iterations if resume else 0
        result = fit(
            estimator, Dataset.from_pairs(pairs), target, train_config(experiment, seed),
            rng=stream(seed, "train", estimator, done),
            resume=resume,
            init_rng=stream(seed, "init", estimator),
        )
        extra = {"target": result.target.model.to_dict()}

    payload = checkpoint_payload(result.q, {
        "estimator": estimator,
        "iterations": result.iterations,
        "seed": seed,
        "config_hash": digest,
        "dataset_hash": manifest["content_hash"],
        **extra,
    })
    save_checkpoint(checkpoint_path, payload)
    write_diagnostics(diagnostics_path, result.diagnostics, digest)
    if result.diagnostics:
        logger.info(f"Final window loss {result.diagnostics[-1].loss:.5g} after {result.iterations} iterations")
    print(checkpoint_path)
    return EXIT_OK
