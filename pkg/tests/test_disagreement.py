import math

import numpy as np
import pytest
from scipy import stats

from edq.core_process import (
    ZERO,
    Component,
    ConstantIntensity,
    Event,
    EventKind,
    FunctionIntensity,
    Policy,
    ProcessSpec,
    Trajectory,
    constant_mark,
    sample_trajectory,
)
from edq.disagreement import (
    AugmentedSample,
    Boundary,
    earliest_disagreement,
    sample_augmented,
    sample_target_segment,
    splice,
)
from edq.errors import DisagreementError
from edq.simulators import build_policy, build_source, preset_params


def _base() -> Trajectory:
    return Trajectory([
        Event(0.5, EventKind.FEATURE, (3.0,)),
        Event(1.0, EventKind.OUTCOME, (2.0,)),
        Event(2.0, EventKind.TREATMENT, (1.0,)),
        Event(2.5, EventKind.FEATURE, (4.0,)),
        Event(3.0, EventKind.OUTCOME, (5.0,)),
    ], horizon=4.0)


def _treat(time: float) -> Event:
    return Event(time, EventKind.TREATMENT, (1.0,))


def _policy(rate: float) -> Policy:
    return Policy(ConstantIntensity(rate), constant_mark(1.0), mark_dim=1, name=f"rate-{rate}")


def test_zero_target_gives_an_empty_segment(rng) -> None:
    assert sample_target_segment(_base(), Policy(ZERO, mark_dim=1), 0.0, rng) == []


def test_first_target_delay_is_exponential(rng) -> None:
    base = Trajectory([Event(float(k), EventKind.FEATURE, (0.0,)) for k in range(1, 50)], horizon=100.0)
    delays = []
    for _ in range(4000):
        segment = sample_target_segment(base, _policy(1.0), 0.0, rng, lazy=True)
        delays.append(segment[0].time)
    assert abs(np.mean(delays) - 1.0) < 4.0 / math.sqrt(4000)


def test_target_treats_first() -> None:
    delta, boundary = earliest_disagreement(_base(), [_treat(1.5)], 0.7)
    assert boundary is Boundary.TARGET_TREATS
    assert delta == pytest.approx(0.8)


def test_observed_treats_first() -> None:
    delta, boundary = earliest_disagreement(_base(), [_treat(3.5)], 0.7)
    assert boundary is Boundary.OBSERVED_TREATS
    assert delta == pytest.approx(1.3)


def test_simultaneous_treatments_count_as_target() -> None:
    _, boundary = earliest_disagreement(_base(), [_treat(2.0)], 0.5)
    assert boundary is Boundary.TARGET_TREATS


def test_no_treatment_reaches_the_horizon() -> None:
    delta, boundary = earliest_disagreement(_base(), [], 2.0)
    assert boundary is Boundary.HORIZON_REACHED
    assert delta == 2.0


def test_target_treatment_at_the_horizon_reaches_the_horizon() -> None:
    delta, boundary = earliest_disagreement(_base(), [_treat(4.0)], 2.0)
    assert boundary is Boundary.HORIZON_REACHED
    assert delta == 2.0


def test_segment_outside_the_window_is_rejected() -> None:
    with pytest.raises(DisagreementError):
        earliest_disagreement(_base(), [_treat(0.2)], 0.5)


def test_splice_keeps_observed_features_and_outcomes_and_target_treatment() -> None:
    base = _base()
    delta, _ = earliest_disagreement(base, [_treat(1.5)], 0.7)
    spliced = splice(base, [_treat(1.5)], 0.7, delta)
    assert [(e.time, e.kind) for e in spliced] == [
        (0.5, EventKind.FEATURE),
        (1.0, EventKind.OUTCOME),
        (1.5, EventKind.TREATMENT),
    ]


def test_splice_never_includes_observed_treatments_of_the_window() -> None:
    base = _base()
    delta, _ = earliest_disagreement(base, [_treat(3.5)], 0.7)
    spliced = splice(base, [_treat(3.5)], 0.7, delta)
    assert [e.time for e in spliced] == [0.5, 1.0]


def test_splice_to_the_horizon_keeps_the_tail() -> None:
    base = _base()
    spliced = splice(base, [], 2.0, 2.0)
    assert [e.time for e in spliced] == [0.5, 1.0, 2.0, 2.5, 3.0]


def test_splice_checks_delta() -> None:
    with pytest.raises(DisagreementError):
        splice(_base(), [_treat(1.5)], 0.7, 0.5)


def test_mark_space_mismatch_is_an_error(rng) -> None:
    target = Policy(ConstantIntensity(1.0), constant_mark((1.0, 0.0)), mark_dim=2)
    with pytest.raises(DisagreementError):
        sample_target_segment(_base(), target, 0.0, rng)


def test_anchor_at_the_horizon_is_an_error(rng) -> None:
    with pytest.raises(DisagreementError):
        sample_target_segment(_base(), _policy(1.0), 4.0, rng)


def test_lazy_sampling_gives_the_same_disagreement() -> None:
    base = _base()
    for seed in range(200):
        lazy = sample_target_segment(base, _policy(0.7), 0.3, np.random.default_rng(seed), lazy=True)
        full = sample_target_segment(base, _policy(0.7), 0.3, np.random.default_rng(seed), lazy=False)
        assert earliest_disagreement(base, lazy, 0.3) == earliest_disagreement(base, full, 0.3)


def test_grid_target_treats_at_its_first_instant(rng) -> None:
    target = Policy(ConstantIntensity(1.0), constant_mark(1.0), mark_dim=1, decision_period=1.0, decision_offset=0.25)
    segment = sample_target_segment(_base(), target, 0.5, rng, lazy=True)
    assert [e.time for e in segment] == [1.25]


def test_target_times_never_equal_observed_times(rng) -> None:
    base = _base()
    times = set(base.times)
    for _ in range(500):
        for event in sample_target_segment(base, _policy(3.0), 0.0, rng):
            assert event.time not in times


def test_augmented_trajectory_relabels_observed_treatments(rng) -> None:
    sample = AugmentedSample(_base(), (_treat(1.5),), 0.7, 0.8, Boundary.TARGET_TREATS)
    kinds = [e.kind for e in sample.as_trajectory()]
    assert kinds.count(EventKind.OBSERVED_TREATMENT) == 1
    assert kinds.count(EventKind.TREATMENT) == 1
    assert sample.end == pytest.approx(1.5)


def test_sample_augmented_is_consistent(rng) -> None:
    base = _base()
    for _ in range(200):
        sample = sample_augmented(base, _policy(0.5), 0.5, rng)
        assert sample.delta > 0
        spliced = sample.spliced()
        assert all(e.kind is not EventKind.OBSERVED_TREATMENT for e in spliced)
        if sample.boundary is Boundary.HORIZON_REACHED:
            assert sample.end == base.horizon


# ======================================================================================
#                                 *** Sampling laws ***
# ======================================================================================

def test_first_target_delay_follows_the_truncated_exponential(rng) -> None:
    base = Trajectory([Event(1.0, EventKind.FEATURE, (0.0,)), Event(2.0, EventKind.FEATURE, (0.0,))], horizon=3.0)
    delays, censored = [], 0
    for _ in range(5000):
        segment = sample_target_segment(base, _policy(1.0), 0.0, rng, lazy=True)
        if segment:
            delays.append(segment[0].time)
        else:
            censored += 1
    assert stats.kstest(delays, "truncexpon", args=(3.0,)).pvalue > 0.01
    assert abs(censored / 5000 - math.exp(-3.0)) < 4.0 * math.sqrt(math.exp(-3.0) / 5000)


def _feature_driven_spec() -> ProcessSpec:
    """Features ignore treatments; the policy only reads the feature count."""
    policy = Policy(
        FunctionIntensity(lambda u, h: min(2.0, 0.2 + 0.3 * h.count(EventKind.FEATURE)), bound=2.0, name="count"),
        name="count",
    )
    return ProcessSpec(Component(ConstantIntensity(1.0), name="feature"), Component(ZERO, name="outcome"),
                       policy, 10.0)


def _first_time(events, t: float, horizon: float) -> float:
    return min((e.time for e in events if e.kind is EventKind.TREATMENT and e.time > t), default=horizon)


def test_target_equal_to_observed_policy_reproduces_the_first_treatment_law() -> None:
    spec = _feature_driven_spec()
    t = 1.0
    observed_rng, base_rng, target_rng = (np.random.default_rng(s) for s in (31, 32, 33))
    observed = [_first_time(sample_trajectory(spec, observed_rng), t, spec.horizon) for _ in range(2000)]
    targeted = []
    for _ in range(2000):
        base = sample_trajectory(spec, base_rng)
        segment = sample_target_segment(base, spec.policy, t, target_rng)
        targeted.append(_first_time(segment, t, spec.horizon))
    assert stats.ks_2samp(observed, targeted).pvalue > 0.01


# ======================================================================================
#                                *** Structural laws ***
# ======================================================================================

def _random_base(rng) -> Trajectory:
    times = np.sort(rng.uniform(0.0, 10.0, size=int(rng.integers(1, 9))))
    kinds = (EventKind.FEATURE, EventKind.OUTCOME, EventKind.TREATMENT)
    picks = rng.integers(len(kinds), size=len(times))
    return Trajectory([Event(float(u), kinds[int(i)], (1.0,)) for u, i in zip(times, picks)], horizon=10.0)


def test_removing_treatments_never_shortens_the_window(rng) -> None:
    for _ in range(300):
        base = _random_base(rng)
        t = float(rng.uniform(0.0, 9.0))
        segment = [_treat(float(u)) for u in np.sort(rng.uniform(t, 10.0, size=int(rng.integers(0, 4))))]
        delta, _ = earliest_disagreement(base, segment, t)
        for i in range(len(segment)):
            fewer = segment[:i] + segment[i + 1:]
            assert earliest_disagreement(base, fewer, t)[0] >= delta
        for i, event in enumerate(base.events):
            if event.kind is not EventKind.TREATMENT:
                continue
            thinner = Trajectory(base.events[:i] + base.events[i + 1:], base.horizon)
            assert earliest_disagreement(thinner, segment, t)[0] >= delta


def _summary(traj: Trajectory) -> tuple:
    outcome = traj.last_of_kind(EventKind.OUTCOME)
    return (traj.count(EventKind.FEATURE), traj.count(EventKind.TREATMENT), outcome.mark if outcome else None)


def test_augmentation_leaves_the_base_law_unchanged() -> None:
    source = build_source("failure-short", {}, {"rate": 2.0})
    target = build_policy("failure-short", preset_params("failure-short"), {"rate": 0.2})
    plain_rng, augmented_rng, target_rng = (np.random.default_rng(41) for _ in range(3))
    plain = [_summary(source.sample(plain_rng)[0]) for _ in range(300)]
    kept = []
    for _ in range(300):
        base, _ = source.sample(augmented_rng)
        sample = sample_augmented(base, target, float(target_rng.uniform(0.0, base.horizon)), target_rng)
        assert sample.base is base
        # drop the target treatments and restore the observed ones
        events = [Event(e.time, EventKind.TREATMENT, e.mark) if e.kind is EventKind.OBSERVED_TREATMENT else e
                  for e in sample.as_trajectory() if e.kind is not EventKind.TREATMENT]
        kept.append(_summary(Trajectory(events, base.horizon)))
    assert kept == plain
