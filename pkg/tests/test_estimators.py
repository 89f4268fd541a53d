import math

import numpy as np
import pytest
from scipy import stats

from edq import oracle
from edq.approximator import FeatureConfig, MlpQ
from edq.core_process import ZERO, ConstantIntensity, Event, EventKind, Policy, Trajectory, constant_mark
from edq.disagreement import Boundary
from edq.errors import ConfigError
from edq.estimators import (
    Dataset,
    Predictor,
    TrainConfig,
    edq_draw,
    edq_label_discrete,
    fit,
    fqe_draw,
    fqe_label_discrete,
    sample_time,
    train_edq_tabular,
    treatment_probability_in_cell,
)
from edq.simulators import build_policy, build_source, preset_params


def _base() -> Trajectory:
    return Trajectory([
        Event(0.5, EventKind.FEATURE, (3.0,)),
        Event(1.0, EventKind.OUTCOME, (2.0,)),
        Event(2.0, EventKind.TREATMENT, (1.0,)),
        Event(2.5, EventKind.FEATURE, (4.0,)),
        Event(3.0, EventKind.OUTCOME, (5.0,)),
    ], horizon=4.0)


def _never_called(history, t):
    raise AssertionError("bootstrap value requested")


def _tiny_config(**overrides) -> TrainConfig:
    base = dict(
        iterations=30, batch_size=4, step_size=1e-3, hidden_sizes=(8,), log_every=10,
        features=FeatureConfig(history_k=4, time_dim=4, mark_dim=1, mark_scale=0.1, outcome_scale=0.1),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def short_data():
    source = build_source("failure-short", {}, {"rate": 2.0})
    return Dataset.sample(source, 20, np.random.default_rng(11))


@pytest.fixture
def short_target():
    return build_policy("failure-short", preset_params("failure-short"), {"rate": 0.2})


# ======================================================================================
#                                  *** Point-process labels ***
# ======================================================================================

def test_zero_target_label_is_the_future_outcome_sum(rng) -> None:
    untreated = _base().without_kind(EventKind.TREATMENT)
    label, delta, boundary = edq_draw(untreated, 0.5, Policy(ZERO, mark_dim=1), _never_called, rng)
    assert label == 7.0
    assert delta == 3.5
    assert boundary is Boundary.HORIZON_REACHED


def test_edq_label_bootstraps_at_the_target_treatment(rng) -> None:
    seen = []

    def q_target(history, t):
        seen.append((history, t))
        return 100.0

    # a huge rate treats almost immediately after t, before any outcome
    target = Policy(ConstantIntensity(1e6), constant_mark(1.0), mark_dim=1)
    label, delta, boundary = edq_draw(_base(), 1.5, target, q_target, rng)
    assert boundary is Boundary.TARGET_TREATS
    assert label == 100.0
    history, t = seen[0]
    assert history[-1].kind is EventKind.TREATMENT
    assert history[-1].time == pytest.approx(t)
    assert t == pytest.approx(1.5 + delta)
    assert [e.kind for e in history][:2] == [EventKind.FEATURE, EventKind.OUTCOME]


def test_fqe_draw_at_the_horizon(rng) -> None:
    label, delta, boundary = fqe_draw(_base(), 3.5, 1.0, Policy(ZERO, mark_dim=1), _never_called, rng)
    assert (label, delta, boundary) == (0.0, 0.5, Boundary.HORIZON_REACHED)


def test_fqe_draw_without_target_treatment_drops_observed_ones(rng) -> None:
    seen = []

    def q_target(history, t):
        seen.append((history, t))
        return 10.0

    label, delta, boundary = fqe_draw(_base(), 1.5, 2.0, Policy(ZERO, mark_dim=1), q_target, rng)
    assert label == 15.0
    assert delta == 2.0
    assert boundary is Boundary.OBSERVED_TREATS
    history, t = seen[0]
    assert t == 3.5
    assert [e.time for e in history] == [0.5, 1.0, 2.5, 3.0]


def test_cell_treatment_probability() -> None:
    rate = Policy(ConstantIntensity(0.7), constant_mark(1.0), mark_dim=1)
    assert treatment_probability_in_cell(_base(), rate, 0.5, 1.5) == pytest.approx(1.0 - math.exp(-0.7))
    grid = Policy(ConstantIntensity(0.3), constant_mark(1.0), mark_dim=1, decision_period=1.0, decision_offset=0.5)
    assert treatment_probability_in_cell(_base(), grid, 0.5, 2.5) == pytest.approx(1.0 - 0.7 ** 2)


def test_time_samplers(rng) -> None:
    traj = _base()
    for _ in range(200):
        assert 0.0 <= sample_time(traj, rng, "uniform") < 4.0
        assert 0.0 <= sample_time(traj, rng, "active") <= 3.0
        assert sample_time(traj, rng, "events") in {0.0, 0.5, 1.0, 2.0, 2.5, 3.0}
    with pytest.raises(ConfigError):
        sample_time(traj, rng, "grid")


# ======================================================================================
#                                     *** Discrete labels ***
# ======================================================================================

def _mean_root_label(proc, label_fn, q, n, seed) -> float:
    rng = np.random.default_rng(seed)
    labels = [label_fn(proc, oracle.sample_episode(proc, rng), 0, q.value, rng) for _ in range(n)]
    return float(np.mean(labels))


def test_discrete_labels_are_unbiased_at_the_fixed_point(fixture_process) -> None:
    edq_q = oracle.edq_fixed_point(fixture_process)
    fqe_q = oracle.fqe_fixed_point(fixture_process)
    assert _mean_root_label(fixture_process, edq_label_discrete, edq_q, 10_000, 1) == pytest.approx(1.6, abs=0.04)
    assert _mean_root_label(fixture_process, fqe_label_discrete, fqe_q, 10_000, 2) == pytest.approx(1.6, abs=0.04)


@pytest.mark.slow
def test_discrete_labels_are_unbiased_at_random_query_points() -> None:
    rng = np.random.default_rng(5)
    proc = oracle.random_process(rng, horizon=4, n_features=2, n_actions=2)
    q = oracle.edq_fixed_point(proc)
    # joint 99% level over the ten query points
    z = stats.norm.ppf(1.0 - 0.01 / (2 * 10))
    for _ in range(10):
        history, _ = oracle.sample_episode(proc, rng)
        step = int(rng.integers(proc.horizon))
        prefix = history[:step]
        labels = np.array([
            edq_label_discrete(proc, oracle.sample_episode(proc, rng, prefix=prefix), step, q.value, rng)
            for _ in range(100_000)
        ])
        half_width = z * labels.std(ddof=1) / math.sqrt(len(labels))
        assert abs(labels.mean() - q.value(prefix)) <= half_width, (prefix, labels.mean(), q.value(prefix))


def test_exact_tabular_sweeps_reach_the_fixed_points(rng) -> None:
    for _ in range(5):
        proc = oracle.random_process(rng, horizon=3, n_features=2, n_actions=2)
        edq = train_edq_tabular(proc, (), proc.horizon + 1, exact=True)
        assert edq.q.max_abs_diff(oracle.edq_fixed_point(proc)) < 1e-9
        fqe = train_edq_tabular(proc, (), proc.horizon + 1, rule="fqe", exact=True)
        assert fqe.q.max_abs_diff(oracle.target_values(proc)) < 1e-9


def test_sampled_tabular_edq_converges(fixture_process) -> None:
    rng = np.random.default_rng(3)
    episodes = [oracle.sample_episode(fixture_process, rng) for _ in range(20_000)]
    result = train_edq_tabular(fixture_process, episodes, 50_000, rng, log_every=10_000)
    assert result.iterations == 50_000
    assert len(result.diagnostics) == 5
    assert result.q.max_abs_diff(oracle.target_values(fixture_process)) < 0.05


def _low_noise_process():
    """Three steps, balanced observed actions and rewards in [0, 0.2]."""
    return oracle.DiscreteProcess.from_functions(
        3, (0, 1), (0, 1),
        feature_fn=lambda h: (0.5, 0.5),
        reward_fn=lambda h, x: 0.1 * x + 0.05 * len(h),
        observed_fn=lambda h, x: (0.5, 0.5),
        target_fn=lambda h, x: (0.2, 0.8),
    ).validate()


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sampled_tabular_edq_reaches_the_fixed_point(seed) -> None:
    proc = _low_noise_process()
    rng = np.random.default_rng(seed)
    episodes = [oracle.sample_episode(proc, rng) for _ in range(50_000)]
    result = train_edq_tabular(proc, episodes, 200_000, rng, log_every=50_000)
    assert result.iterations == 200_000
    assert result.q.max_abs_diff(oracle.edq_fixed_point(proc)) < 1e-2


def test_tabular_visit_counts_carry_over(fixture_process) -> None:
    rng = np.random.default_rng(4)
    episodes = [oracle.sample_episode(fixture_process, rng) for _ in range(50)]
    first = train_edq_tabular(fixture_process, episodes, 100, rng)
    assert sum(first.visits.values()) == 100
    before = dict(first.visits)
    second = train_edq_tabular(fixture_process, episodes, 100, rng, q=first.q, visits=first.visits)
    assert sum(second.visits.values()) == 200
    assert first.visits == before


def test_tabular_rule_and_episodes_are_checked(fixture_process) -> None:
    with pytest.raises(ConfigError):
        train_edq_tabular(fixture_process, [], 10, rule="td")
    with pytest.raises(ConfigError):
        train_edq_tabular(fixture_process, [], 10)


# ======================================================================================
#                                      *** Training ***
# ======================================================================================

@pytest.mark.parametrize("estimator", ["edq", "fqe", "erm"])
def test_short_fit_runs_and_logs(estimator, short_data, short_target) -> None:
    result = fit(estimator, short_data, short_target, _tiny_config(), np.random.default_rng(1),
                 init_rng=np.random.default_rng(2))
    assert result.iterations == 30
    assert len(result.losses) == 30
    assert [row.iteration for row in result.diagnostics] == [10, 20, 30]
    prefixes = [(traj.history(1.0), 1.0) for traj in short_data.trajectories[:5]]
    assert np.all(np.isfinite(result.predictor().predict(prefixes)))
    if estimator == "erm":
        assert all(row.frac_horizon == 1.0 for row in result.diagnostics)


def test_training_is_deterministic_per_seed(short_data, short_target) -> None:
    runs = [
        fit("edq", short_data, short_target, _tiny_config(), np.random.default_rng(3), init_rng=np.random.default_rng(4))
        for _ in range(2)
    ]
    assert runs[0].losses == runs[1].losses


def test_loss_on_a_frozen_target_network_decreases() -> None:
    curves = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        reference = MlpQ(4, (16,), rng=rng)
        learner = MlpQ(4, (16,), step_size=0.05, rng=rng)
        losses = []
        for _ in range(1000):
            x = rng.normal(size=(32, 4))
            losses.append(learner.grad_step(x, reference.predict(x)))
        curves.append(losses)
    windows = np.mean(curves, axis=0).reshape(5, 200).mean(axis=1)
    assert windows[-1] < windows[0]
    assert np.all(windows[1:] <= windows[:-1] * 1.1)


def test_resume_continues_the_iteration_count(short_data, short_target) -> None:
    cfg = _tiny_config()
    first = fit("edq", short_data, short_target, cfg, np.random.default_rng(1), init_rng=np.random.default_rng(2))
    second = fit("edq", short_data, short_target, cfg, np.random.default_rng(5), resume=first)
    assert second.iterations == 60
    assert len(second.losses) == 60
    assert [row.iteration for row in second.diagnostics] == [10, 20, 30, 40, 50, 60]


def test_predictor_adds_past_outcomes_except_for_erm(short_data, short_target) -> None:
    result = fit("edq", short_data, short_target, _tiny_config(iterations=1), np.random.default_rng(1))
    traj = _base()
    prefixes = [(traj.history(3.5), 3.5)]
    raw = result.q.values(prefixes)
    assert Predictor("edq", result.q).predict(prefixes)[0] == pytest.approx(raw[0] + 7.0)
    assert Predictor("erm", result.q).predict(prefixes)[0] == raw[0]


def test_training_inputs_are_checked(short_data, short_target) -> None:
    with pytest.raises(ConfigError):
        fit("edq-tabular", short_data, short_target, _tiny_config())
    with pytest.raises(ConfigError):
        fit("edq", Dataset((), ()), short_target, _tiny_config())
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigError):
        TrainConfig(time_sampling="grid")
    with pytest.raises(ConfigError):
        Dataset.from_pairs([(Trajectory([], 1.0), 0.0), (Trajectory([], 2.0), 0.0)])


def test_erm_reads_outcomes_by_dataset_position() -> None:
    shared = _base()
    data = Dataset.from_pairs([(shared, 0.0), (shared, 10.0)])
    result = fit("erm", data, Policy(ZERO, mark_dim=1), _tiny_config(iterations=10, batch_size=8),
                 np.random.default_rng(6), init_rng=np.random.default_rng(7))
    (row,) = result.diagnostics
    assert 0.0 < row.mean_label < 10.0
