import csv
import math

import numpy as np
import pytest
from scipy import stats

from edq.approximator import FeatureConfig
from edq.errors import ConfigError
from edq.estimators import TrainConfig
from edq.evaluation import (
    AGGREGATE_COLUMNS,
    RESULTS_COLUMNS,
    ResultRow,
    Setting,
    aggregate,
    aggregate_csv,
    build_test_set,
    grid_jobs,
    normalized_rmse,
    results_csv,
    run_grid,
)
from edq.simulators import build_source


def _rows(values, estimator="edq") -> list:
    return [ResultRow(estimator, "2.0", "0.2", seed, value, 100) for seed, value in enumerate(values)]


def _tiny_train() -> TrainConfig:
    return TrainConfig(
        iterations=20, batch_size=4, hidden_sizes=(8,), log_every=10,
        features=FeatureConfig(history_k=4, time_dim=4, mark_dim=1, mark_scale=0.1, outcome_scale=0.1),
    )


def _table(text: str) -> list:
    return list(csv.reader(line for line in text.splitlines() if not line.startswith("#")))


def test_predicting_the_mean_scores_one() -> None:
    labels = np.array([1.0, 2.0, 3.0, 4.0])
    assert normalized_rmse(np.full(4, labels.mean()), labels) == pytest.approx(1.0)
    assert normalized_rmse(labels, labels) == 0.0
    assert normalized_rmse(labels + 1.0, labels) == pytest.approx(1.0 / np.std(labels))


def test_normalized_rmse_rejects_degenerate_inputs() -> None:
    with pytest.raises(ValueError):
        normalized_rmse([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        normalized_rmse([1.0], [1.0])
    with pytest.raises(ValueError):
        normalized_rmse([1.0, 2.0], [3.0, 3.0])


def test_aggregate_standard_error_over_seeds() -> None:
    (report,) = aggregate(_rows([0.5, 0.7, 0.9]), n_test=1000)
    assert report.nrmse == pytest.approx(0.7)
    assert report.nrmse_se == pytest.approx(0.2 / math.sqrt(3))
    assert report.seeds == (0, 1, 2)
    assert report.n_prefixes == 100


def test_aggregate_with_too_few_seeds(caplog) -> None:
    (report,) = aggregate(_rows([0.5, 0.7]), n_test=1000)
    assert math.isnan(report.nrmse_se)
    assert "standard error needs 3" in caplog.text
    with pytest.raises(ConfigError):
        aggregate(_rows([0.5]), n_test=1000, strict=True)


def test_aggregate_groups_by_estimator_and_setting() -> None:
    reports = aggregate(_rows([0.5, 0.6, 0.7]) + _rows([1.0, 1.1, 1.2], "erm"), n_test=10)
    assert [(r.estimator, len(r.seeds)) for r in reports] == [("edq", 3), ("erm", 3)]


def test_results_tables() -> None:
    rows = _rows([0.5, float("nan")])
    table = _table(results_csv(rows))
    assert tuple(table[0]) == RESULTS_COLUMNS
    assert table[1] == ["edq", "2.0", "0.2", "0", "0.5", "100"]
    assert table[2][4] == "nan"
    assert results_csv(rows).startswith("# edq-results v1")

    agg = _table(aggregate_csv(aggregate(_rows([0.5, 0.7, 0.9]), n_test=1000)))
    assert tuple(agg[0]) == AGGREGATE_COLUMNS
    assert agg[1][0] == "edq" and agg[1][5] == "3" and agg[1][-1] == "0 1 2"


def test_test_set_has_one_prefix_per_event(rng) -> None:
    source = build_source("failure-short", {}, {"rate": 0.2})
    points = build_test_set(source, 5, rng)
    assert {p.traj_id for p in points} == set(range(5))
    for p in points:
        assert p.history.last_time == p.time
    by_traj = {}
    for p in points:
        by_traj.setdefault(p.traj_id, set()).add(p.label)
    assert all(len(labels) == 1 for labels in by_traj.values())
    with pytest.raises(ConfigError):
        build_test_set(source, 0, rng)


def test_grid_jobs_share_data_per_policy_pair() -> None:
    settings = [
        Setting({"rate": 2.0}, {"rate": 0.2}, "edq"),
        Setting({"rate": 2.0}, {"rate": 0.2}, "erm"),
        Setting({"rate": 0.2}, {"rate": 2.0}, "edq"),
        Setting({"rate": 2.0}, {"rate": 0.2}, "edq"),
    ]
    jobs = grid_jobs("failure-short", {}, settings, [0, 1], _tiny_train(), 10, 10)
    assert len(jobs) == 4
    assert [job.estimators for job in jobs] == [("edq", "erm"), ("edq", "erm"), ("edq",), ("edq",)]
    assert [job.seed for job in jobs] == [0, 1, 0, 1]


def test_grid_rejects_unsupported_inputs() -> None:
    with pytest.raises(ConfigError):
        run_grid("oracle", {}, [Setting({}, {}, "edq")], [0], _tiny_train(), 10, 10)
    with pytest.raises(ConfigError):
        run_grid("failure-short", {}, [Setting({}, {}, "edq-tabular")], [0], _tiny_train(), 10, 10)


def test_grid_results_do_not_depend_on_worker_count() -> None:
    settings = [Setting({"rate": 2.0}, {"rate": 0.2}, "erm"), Setting({"rate": 2.0}, {"rate": 0.2}, "edq")]
    serial_rows, serial_reports = run_grid("failure-short", {}, settings, [0, 1, 2], _tiny_train(), 10, 10, jobs=1)
    parallel_rows, _ = run_grid("failure-short", {}, settings, [0, 1, 2], _tiny_train(), 10, 10, jobs=2)
    assert serial_rows == parallel_rows
    assert len(serial_rows) == 6
    assert all(np.isfinite(r.nrmse) for r in serial_rows)
    assert [r.estimator for r in serial_reports] == ["erm", "edq"]


@pytest.mark.parametrize("scale", [2.0, -4.0, 0.5, 3.7, -1e-3])
def test_normalized_rmse_is_scale_invariant(scale) -> None:
    rng = np.random.default_rng(8)
    preds, labels = rng.normal(size=50), rng.normal(size=50)
    value = normalized_rmse(preds, labels)
    scaled = normalized_rmse(scale * preds, scale * labels)
    if math.log2(abs(scale)).is_integer():
        assert scaled == value
    else:
        assert scaled == pytest.approx(value, rel=1e-12)


def test_test_set_prefixes_are_strictly_nested(rng) -> None:
    source = build_source("failure-short", {}, {"rate": 2.0})
    by_traj: dict = {}
    for p in build_test_set(source, 20, rng):
        by_traj.setdefault(p.traj_id, []).append(p)
    for points in by_traj.values():
        for shorter, longer in zip(points[:-1], points[1:]):
            assert shorter.time < longer.time
            assert len(shorter.history) < len(longer.history)
            assert longer.history.events[:len(shorter.history)] == shorter.history.events


@pytest.mark.slow
def test_test_set_labels_follow_the_outcome_law() -> None:
    source = build_source("failure-short", {}, {"rate": 0.2})
    points = build_test_set(source, 5000, np.random.default_rng(51))
    labels = list({p.traj_id: p.label for p in points}.values())
    assert len(labels) == 5000
    fresh_rng = np.random.default_rng(52)
    outcomes = [source.sample(fresh_rng)[1] for _ in range(5000)]
    assert stats.ks_2samp(labels, outcomes).pvalue > 0.01


# ======================================================================================
#                           *** Orderings in the short regime ***
# ======================================================================================

def _desk_train() -> TrainConfig:
    return TrainConfig(
        iterations=20_000, batch_size=32, step_size=1e-3, tau=0.01, time_sampling="active",
        features=FeatureConfig(mark_dim=1, mark_scale=0.1, outcome_scale=0.1),
    )


@pytest.fixture(scope="module")
def short_regime():
    pairs = [({"rate": 2.0}, {"rate": 0.2}), ({"rate": 0.2}, {"rate": 0.2}), ({"rate": 0.2}, {"rate": 2.0})]
    settings = [Setting(obs, target, estimator) for obs, target in pairs for estimator in ("erm", "fqe", "edq")]
    rows, reports = run_grid("failure-short", {}, settings, [0, 1, 2], _desk_train(), 1000, 1000, jobs=3)
    per_seed = {(r.estimator, r.setting_obs, r.setting_int, r.seed): r.nrmse for r in rows}
    return per_seed, {(r.estimator, r.setting_obs, r.setting_int): r for r in reports}


@pytest.mark.slow
def test_edq_beats_erm_in_every_seed_under_shift(short_regime) -> None:
    per_seed, _ = short_regime
    for seed in (0, 1, 2):
        assert per_seed[("edq", "2.0", "0.2", seed)] < per_seed[("erm", "2.0", "0.2", seed)]


@pytest.mark.slow
def test_edq_matches_erm_on_policy(short_regime) -> None:
    _, reports = short_regime
    edq, erm = reports[("edq", "0.2", "0.2")], reports[("erm", "0.2", "0.2")]
    assert abs(edq.nrmse - erm.nrmse) <= 2.0 * math.hypot(edq.nrmse_se, erm.nrmse_se)


@pytest.mark.slow
def test_edq_is_no_worse_than_fqe_when_treating_more(short_regime) -> None:
    _, reports = short_regime
    assert reports[("edq", "0.2", "2.0")].nrmse <= reports[("fqe", "0.2", "2.0")].nrmse


@pytest.mark.slow
def test_erm_degrades_under_shift(short_regime) -> None:
    _, reports = short_regime
    assert reports[("erm", "2.0", "0.2")].nrmse > reports[("erm", "0.2", "0.2")].nrmse
