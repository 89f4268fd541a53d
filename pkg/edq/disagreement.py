"""
(©) EDQ Lab

The augmented process: target-policy treatments sampled against an observed
history, the earliest disagreement time, and the spliced history used by EDQ labels.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from edq.core_process import Event, EventKind, Policy, Trajectory, separate_tie
from edq.errors import DisagreementError, EdqError, IntensityError, UpperBoundViolation

logger = logging.getLogger(__name__)

_TREATMENT_KINDS = (EventKind.TREATMENT, EventKind.OBSERVED_TREATMENT)


class Boundary(str, Enum):
    TARGET_TREATS = "TargetTreats"
    OBSERVED_TREATS = "ObservedTreats"
    HORIZON_REACHED = "HorizonReached"


# ======================================================================================
#                              *** Target segment sampling ***
# ======================================================================================

def _check_mark_space(base: Trajectory, target: Policy):
    for event in base.events:
        if event.kind in _TREATMENT_KINDS and len(event.mark) != target.mark_dim:
            raise DisagreementError(
                f"Observed treatment at t={event.time!r} has mark dimension {len(event.mark)}, "
                f"but target policy '{target.name}' uses {target.mark_dim}."
            )


def _call_target(fn, *args):
    try:
        return fn(*args)
    except EdqError:
        raise
    except (TypeError, ValueError, IndexError, KeyError, ArithmeticError) as e:
        raise DisagreementError(f"Target policy cannot be evaluated on the observed history: {e}") from e


def _avoid_base_times(u: float, base_times: set, horizon: float, rng) -> float:
    """A target time equal to an observed event time is moved one ulp to a uniformly chosen side."""
    if u not in base_times:
        return u
    if u >= horizon or rng.random() < 0.5:
        return float(np.nextafter(u, -math.inf))
    return float(np.nextafter(u, math.inf))


def sample_target_segment(base: Trajectory, target: Policy, t: float, rng, lazy: bool = False) -> list:
    """
    Target treatments on (t, T] drawn against the observed history.

    The target intensity at u sees the features, outcomes and observed treatments of
    `base` strictly before u; its own draws never enter that history. With `lazy`,
    sampling stops at the first target event or at the first observed treatment after t,
    whichever comes first, since later draws cannot change the earliest disagreement.
    """
    horizon = base.horizon
    if not t < horizon:
        raise DisagreementError(f"Anchor t={t!r} must lie before the horizon {horizon!r}.")
    _check_mark_space(base, target)

    stop_at = horizon
    if lazy:
        first_observed = next((e.time for e in base.after(t) if e.kind in _TREATMENT_KINDS), None)
        if first_observed is not None:
            stop_at = first_observed

    segment: list = []

    if target.is_discrete:
        for u in target.decision_instants(t, horizon):
            if u > stop_at:
                break
            history = base.before(u)
            p = _call_target(target.treatment_probability, u, history)
            if rng.random() < p:
                mark = _call_target(target.draw_mark, u, history, rng)
                segment.append(Event(u, EventKind.TREATMENT, mark))
                if lazy:
                    break
        return segment

    base_times = set(base.times)
    boundaries = sorted({e.time for e in base.after(t) if e.time < horizon} | {horizon})
    s = t
    for end in boundaries:
        history = base.before(end)  # constant on (s, end]
        while True:
            bound = float(_call_target(target.intensity.upper_bound, s, history))
            if not (math.isfinite(bound) and bound >= 0):
                raise IntensityError(f"Target policy '{target.name}' has invalid upper bound {bound!r} at t={s!r}.")
            u = s + rng.exponential(1.0 / bound) if bound > 0 else math.inf
            if u > end:
                break
            rate = float(_call_target(target.intensity.evaluate, u, history))
            if not math.isfinite(rate) or rate < 0:
                raise IntensityError(f"Target policy '{target.name}' has invalid rate {rate!r} at t={u!r}.")
            if rate > bound:
                raise UpperBoundViolation(target.name, u, rate, bound)
            if rng.random() * bound < rate:
                time = _avoid_base_times(u, base_times, horizon, rng)
                if segment:
                    time = separate_tie(segment[-1].time, time)
                mark = _call_target(target.draw_mark, u, history, rng)
                segment.append(Event(time, EventKind.TREATMENT, mark))
                if lazy:
                    return segment
            s = u
        if end >= stop_at:
            break
        s = end
    return segment


# ======================================================================================
#                              *** Earliest disagreement ***
# ======================================================================================

def _boundary_time(base: Trajectory, segment, t: float) -> tuple:
    horizon = base.horizon
    for event in segment:
        if not t < event.time <= horizon:
            raise DisagreementError(f"Target event at {event.time!r} lies outside ({t!r}, {horizon!r}].")
    observed = next((e.time for e in base.after(t) if e.kind in _TREATMENT_KINDS), math.inf)
    targeted = min((e.time for e in segment), default=math.inf)
    first = min(observed, targeted)
    if first >= horizon:
        return horizon, Boundary.HORIZON_REACHED
    if targeted <= observed:
        return targeted, Boundary.TARGET_TREATS
    return observed, Boundary.OBSERVED_TREATS


def earliest_disagreement(base: Trajectory, segment, t: float) -> tuple:
    """
    (δ, boundary): the time from t to the first treatment on either side.

    Treatments at the horizon terminate the window, and a tie between the two sides
    counts as the target treating.
    """
    time, boundary = _boundary_time(base, segment, t)
    return time - t, boundary


def splice(base: Trajectory, segment, t: float, delta: float) -> Trajectory:
    """
    H_t, plus the observed features and outcomes in (t, t+δ], plus the target treatments in (t, t+δ].

    Observed treatments inside the window are never included.
    """
    end, boundary = _boundary_time(base, segment, t)
    if end - t != delta:
        raise DisagreementError(
            f"δ={delta!r} does not match the earliest disagreement {end - t!r} ({boundary.value}) at t={t!r}."
        )
    window = [e for e in base.window(t, end) if e.kind in (EventKind.FEATURE, EventKind.OUTCOME)]
    treatments = [e for e in segment if e.time <= end]
    merged = sorted(window + treatments, key=lambda e: e.time)
    try:
        return Trajectory(base.history(t).events + tuple(merged), base.horizon)
    except ValueError as e:
        raise DisagreementError(f"Spliced history is not strictly ordered: {e}") from e


# ======================================================================================
#                                *** Augmented sample ***
# ======================================================================================

@dataclass(frozen=True)
class AugmentedSample:
    base: Trajectory
    target_treatments: tuple
    anchor: float
    delta: float
    boundary: Boundary

    @property
    def end(self) -> float:
        return self.base.horizon if self.boundary is Boundary.HORIZON_REACHED else self.anchor + self.delta

    def spliced(self) -> Trajectory:
        return splice(self.base, self.target_treatments, self.anchor, self.delta)

    def as_trajectory(self) -> Trajectory:
        """The augmented trajectory: observed treatments relabelled as ObservedTreatment next to the target ones."""
        events = []
        for event in self.base.events:
            if event.kind is EventKind.TREATMENT:
                event = Event(event.time, EventKind.OBSERVED_TREATMENT, event.mark)
            events.append(event)
        merged = sorted(events + list(self.target_treatments), key=lambda e: (e.time, e.kind is EventKind.OBSERVED_TREATMENT))
        ordered = []
        for event in merged:
            if ordered and event.time <= ordered[-1].time:
                # simultaneous grid decisions: the observed one is placed an ulp later
                event = Event(separate_tie(ordered[-1].time, event.time), event.kind, event.mark)
            ordered.append(event)
        return Trajectory(ordered, self.base.horizon)


def sample_augmented(base: Trajectory, target: Policy, t: float, rng, lazy: bool = True) -> AugmentedSample:
    segment = sample_target_segment(base, target, t, rng, lazy=lazy)
    delta, boundary = earliest_disagreement(base, segment, t)
    return AugmentedSample(base, tuple(segment), t, delta, boundary)
