"""
(©) EDQ Lab

This plugin handles the `simulate` command.
- Draws `data.n_train` trajectories under the observed policy of the configured preset.
- Writes the dataset file and its manifest (seed, parameters, config hash, content hash).
"""

import logging

from config import config_hash
from database.database import write_dataset, write_manifest
from edq import oracle, simulators
from helper_func import content_hash, stream
from lab import EXIT_OK, Lab
from plugins import load_fixture, run_dir

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.csv"


def simulate_pairs(experiment, seed: int) -> tuple:
    """(list of (trajectory, Y), horizon, manifest info) for the experiment's observed process."""
    n = experiment.data.n_train
    preset = experiment.simulator.preset
    rng = stream(seed, "simulate", preset)
    if preset == "oracle":
        proc, _ = load_fixture(experiment)
        pairs = []
        for _ in range(n):
            history, rewards = oracle.sample_episode(proc, rng, oracle.Under.OBSERVED)
            pairs.append((oracle.as_trajectory(proc, history, null_action=0), float(sum(rewards))))
        info = {"preset": preset, "n": n, "process_hash": content_hash(proc.to_dict())}
        return pairs, float(proc.horizon), info

    source = simulators.build_source(preset, experiment.simulator.params, experiment.observed_policy)
    pairs = [source.sample(rng) for _ in range(n)]
    info = {
        "preset": preset,
        "n": n,
        "params": simulators.params_dict(source.params),
        "observed_policy": dict(experiment.observed_policy),
    }
    return pairs, source.horizon, info


@Lab.on_command("simulate", help="Simulate an observed-policy dataset.")
def simulate(lab: Lab, args) -> int:
    experiment = lab.load_experiment(args)
    seed = experiment.seeds[0]
    out = run_dir(experiment, args.out)
    path = out / DATASET_FILE

    pairs, horizon, info = simulate_pairs(experiment, seed)
    data_hash = write_dataset(path, pairs, horizon)
    write_manifest(path, seed=seed, config_hash=config_hash(experiment), data_hash=data_hash, info=info)

    n_events = sum(len(traj) for traj, _ in pairs)
    logger.info(f"Simulated {len(pairs)} trajectories ({n_events} events) with seed {seed}")
    print(path)
    return EXIT_OK
