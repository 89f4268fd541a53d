import numpy as np
import pytest

from edq import oracle
from edq.approximator import decode_history_key
from edq.core_process import EventKind
from edq.disagreement import sample_augmented
from edq.errors import OracleError
from edq.oracle import Under


def test_fixture_expectations(fixture_process, fixture_data) -> None:
    expected = fixture_data["expected"]
    assert oracle.enumerate_expectation(fixture_process, (), Under.TARGET) == pytest.approx(expected["target_root"])
    assert oracle.enumerate_expectation(fixture_process, (), Under.OBSERVED) == pytest.approx(expected["observed_root"])
    for key, value in expected["expectations"].items():
        prefix = decode_history_key(key)
        assert oracle.enumerate_expectation(fixture_process, prefix) == pytest.approx(value)


def test_fixture_fixed_point(fixture_process, fixture_data) -> None:
    q = oracle.edq_fixed_point(fixture_process)
    for key, value in fixture_data["expected"]["q"].items():
        assert q.value(decode_history_key(key)) == pytest.approx(value, abs=1e-12)


def test_discrete_identity_on_random_instances(rng) -> None:
    for i in range(30):
        proc = oracle.random_process(rng, horizon=1 + i % 4, n_features=2 + i % 2, n_actions=2)
        prefix = oracle.sample_history(proc, int(rng.integers(proc.horizon)), rng)
        for d in range(1, proc.horizon - len(prefix) + 1):
            lhs, rhs = oracle.verify_discrete_identity(proc, prefix, d)
            assert abs(lhs - rhs) < 1e-9


def test_identity_rejects_out_of_range_depth(fixture_process) -> None:
    with pytest.raises(OracleError):
        oracle.verify_discrete_identity(fixture_process, (), 3)
    with pytest.raises(OracleError):
        oracle.verify_discrete_identity(fixture_process, ((0, 0),), 0)


def test_fixed_points_equal_enumeration(rng) -> None:
    for _ in range(20):
        proc = oracle.random_process(rng, horizon=4, n_features=2, n_actions=2)
        truth = oracle.target_values(proc)
        assert oracle.edq_fixed_point(proc).max_abs_diff(truth) < 1e-9
        assert oracle.fqe_fixed_point(proc).max_abs_diff(truth) < 1e-9
        assert oracle.self_consistency_residual(proc, oracle.edq_fixed_point(proc))[0] < 1e-12


def test_perturbed_table_is_not_self_consistent(fixture_process) -> None:
    q = oracle.edq_fixed_point(fixture_process)
    q.set(((0, 1),), q.value(((0, 1),)) + 0.2)
    residual, worst = oracle.self_consistency_residual(fixture_process, q)
    assert residual > 0.05
    assert worst in ((), ((0, 1),))


def test_overlap_violation_is_rejected(fixture_data) -> None:
    data = dict(fixture_data["process"])
    data["observed_policy"] = {**data["observed_policy"], "|0": [1.0, 0.0]}
    with pytest.raises(OracleError):
        oracle.DiscreteProcess.from_dict(data)


def test_malformed_rows_are_rejected(fixture_data) -> None:
    data = dict(fixture_data["process"])
    data["feature_table"] = {**data["feature_table"], "": [0.5, 0.6]}
    with pytest.raises(OracleError):
        oracle.DiscreteProcess.from_dict(data)
    with pytest.raises(OracleError):
        oracle.DiscreteProcess.from_dict({"horizon": 2})


def test_prefix_with_zero_probability_is_rejected(fixture_process) -> None:
    with pytest.raises(OracleError):
        oracle.enumerate_expectation(fixture_process, ((2, 0),))
    with pytest.raises(OracleError):
        oracle.enumerate_expectation(fixture_process, ((0, 0), (0, 0), (0, 0)))


def test_serialisation_round_trip(fixture_process) -> None:
    restored = oracle.DiscreteProcess.from_dict(fixture_process.to_dict())
    assert oracle.target_values(restored).items() == oracle.target_values(fixture_process).items()


def test_trajectory_embedding_inverts(fixture_process, rng) -> None:
    for _ in range(50):
        history, rewards = oracle.sample_episode(fixture_process, rng)
        traj = oracle.as_trajectory(fixture_process, history, null_action=0)
        assert oracle.history_from_trajectory(traj, null_action=0) == history
        assert traj.count(EventKind.TREATMENT) == sum(a for _, a in history)
        outcomes = [e.value for e in traj.of_kind(EventKind.OUTCOME)]
        assert outcomes == rewards


def test_table_policy_splice_matches_the_oracle(fixture_process) -> None:
    """The augmented draw on the embedded trajectory treats with the target table's probability."""
    rng = np.random.default_rng(9)
    target = oracle.table_policy(fixture_process, Under.TARGET)
    history = ((0, 0), (1, 0))
    traj = oracle.as_trajectory(fixture_process, history, null_action=0)
    treated = 0
    n = 4000
    for _ in range(n):
        sample = sample_augmented(traj, target, 0.0, rng)
        treated += any(e.time == 1.0 for e in sample.target_treatments)
    p = fixture_process.policy_probs((), 0, Under.TARGET)[1]
    assert treated / n == pytest.approx(p, abs=4.0 * np.sqrt(p * (1 - p) / n))


def test_table_policy_needs_binary_actions(fixture_process) -> None:
    rng = np.random.default_rng(0)
    proc = oracle.random_process(rng, horizon=2, n_features=2, n_actions=3)
    with pytest.raises(OracleError):
        oracle.table_policy(proc, Under.TARGET)
    assert oracle.table_policy(fixture_process, Under.OBSERVED).decision_period == 1.0
