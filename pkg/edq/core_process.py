"""
(©) EDQ Lab

Marked decision point processes: events, trajectories, intensities, policies
and trajectory sampling by thinning.

- A `ProcessSpec` bundles feature and outcome components with a treatment `Policy`.
- Every intensity declares its own thinning upper bound; exceeding it is an error.
- A policy may act on a decision grid, in which case its intensity is a per-instant probability.
"""

import bisect
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Protocol, Sequence

import numpy as np

from edq.errors import IntensityError, SimulationError, UpperBoundViolation

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    FEATURE = "Feature"
    OUTCOME = "Outcome"
    TREATMENT = "Treatment"
    OBSERVED_TREATMENT = "ObservedTreatment"  # only inside augmented trajectories


@dataclass(frozen=True, slots=True)
class Event:
    time: float
    kind: EventKind
    mark: tuple = ()

    @property
    def value(self) -> float:
        """First mark coordinate; the reward for outcome events."""
        return self.mark[0] if self.mark else 0.0


def as_mark(value) -> tuple:
    """Normalizes a scalar or array-like mark to a tuple of floats."""
    if value is None:
        return ()
    if np.isscalar(value):
        return (float(value),)
    return tuple(float(v) for v in np.asarray(value, dtype=float).ravel())


# ======================================================================================
#                                  *** Trajectory ***
# ======================================================================================

class Trajectory:
    """
    Strictly time-ordered events on [0, horizon].

    Restriction operators return new trajectories that share the horizon; nothing mutates.
    """

    __slots__ = ("events", "horizon", "_times")

    def __init__(self, events: Sequence[Event] = (), horizon: float = 1.0):
        events = tuple(events)
        horizon = float(horizon)
        if not (math.isfinite(horizon) and horizon > 0):
            raise ValueError(f"Trajectory horizon must be a positive finite number, got {horizon!r}.")
        previous = -math.inf
        for event in events:
            if not isinstance(event.kind, EventKind):
                raise ValueError(f"Event kind must be an EventKind, got {event.kind!r}.")
            if not (math.isfinite(event.time) and 0.0 <= event.time <= horizon):
                raise ValueError(f"Event time {event.time!r} lies outside [0, {horizon}].")
            if event.time <= previous:
                raise ValueError(f"Event times must be strictly increasing; {event.time!r} follows {previous!r}.")
            previous = event.time
        self._set(events, horizon)

    def _set(self, events, horizon):
        self.events = events
        self.horizon = horizon
        self._times = [e.time for e in events]

    @classmethod
    def trusted(cls, events, horizon: float) -> "Trajectory":
        """Builds a trajectory from events already known to be valid (no checks)."""
        obj = cls.__new__(cls)
        obj._set(tuple(events), float(horizon))
        return obj

    # --- container protocol ---
    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, index):
        return self.events[index]

    def __eq__(self, other):
        return isinstance(other, Trajectory) and self.horizon == other.horizon and self.events == other.events

    def __hash__(self):
        return hash((self.events, self.horizon))

    def __repr__(self):
        return f"Trajectory(n_events={len(self.events)}, horizon={self.horizon})"

    @property
    def times(self) -> list:
        return list(self._times)

    @property
    def last_time(self) -> float | None:
        return self._times[-1] if self._times else None

    # --- restrictions ---
    def history(self, t: float) -> "Trajectory":
        """H_t: the events at or before t."""
        return Trajectory.trusted(self.events[: bisect.bisect_right(self._times, t)], self.horizon)

    def before(self, t: float) -> "Trajectory":
        """Events strictly before t; the history an intensity at t may look at."""
        return Trajectory.trusted(self.events[: bisect.bisect_left(self._times, t)], self.horizon)

    def window(self, start: float, end: float) -> tuple:
        """Events in the half-open window (start, end]."""
        lo = bisect.bisect_right(self._times, start)
        hi = bisect.bisect_right(self._times, end)
        return self.events[lo:hi]

    def after(self, t: float) -> tuple:
        return self.events[bisect.bisect_right(self._times, t):]

    def of_kind(self, *kinds: EventKind) -> "Trajectory":
        """H^b: only the events of the given kinds."""
        return Trajectory.trusted([e for e in self.events if e.kind in kinds], self.horizon)

    def without_kind(self, *kinds: EventKind) -> "Trajectory":
        """H^{\\b}: every event except the given kinds."""
        return Trajectory.trusted([e for e in self.events if e.kind not in kinds], self.horizon)

    def last_of_kind(self, *kinds: EventKind) -> Event | None:
        for event in reversed(self.events):
            if event.kind in kinds:
                return event
        return None

    def count(self, *kinds: EventKind) -> int:
        return sum(1 for e in self.events if e.kind in kinds)

    def extended(self, events: Sequence[Event]) -> "Trajectory":
        """A new trajectory with `events` appended; order is validated."""
        return Trajectory(self.events + tuple(events), self.horizon)


def outcome_sum(traj: Trajectory, after: float) -> float:
    """Sum of outcome marks with event time strictly greater than `after`."""
    return float(sum(e.value for e in traj.after(after) if e.kind is EventKind.OUTCOME))


def outcome_total(traj: Trajectory) -> float:
    """Total outcome Y; the `after = 0⁻` case of `outcome_sum`."""
    return float(sum(e.value for e in traj.events if e.kind is EventKind.OUTCOME))


def separate_tie(previous: float, t: float) -> float:
    """Moves `t` one ulp past `previous` when it does not strictly follow it."""
    if t <= previous:
        return float(np.nextafter(previous, math.inf))
    return t


# ======================================================================================
#                                  *** Intensities ***
# ======================================================================================

class IntensityFn(Protocol):
    def evaluate(self, t: float, history: Trajectory) -> float: ...

    def upper_bound(self, t: float, history: Trajectory) -> float:
        """A rate that dominates `evaluate` from t until the next event of the history."""
        ...


class ConstantIntensity:
    def __init__(self, rate: float):
        if not (math.isfinite(rate) and rate >= 0):
            raise IntensityError(f"Constant intensity must be finite and nonnegative, got {rate!r}.")
        self.rate = float(rate)

    def evaluate(self, t, history):
        return self.rate

    def upper_bound(self, t, history):
        return self.rate

    def __repr__(self):
        return f"ConstantIntensity({self.rate})"


ZERO = ConstantIntensity(0.0)


class PiecewiseConstantIntensity:
    """Rate `rates[i]` on `[breakpoints[i], breakpoints[i+1])`, zero outside the breakpoints."""

    def __init__(self, breakpoints: Sequence[float], rates: Sequence[float]):
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        self.rates = np.asarray(rates, dtype=float)
        if self.breakpoints.ndim != 1 or len(self.breakpoints) != len(self.rates) + 1:
            raise IntensityError("Piecewise intensity needs exactly one more breakpoint than rates.")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise IntensityError("Piecewise intensity breakpoints must be strictly increasing.")
        if np.any(~np.isfinite(self.rates)) or np.any(self.rates < 0):
            raise IntensityError("Piecewise intensity rates must be finite and nonnegative.")

    def evaluate(self, t, history):
        i = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        if i < 0 or i >= len(self.rates):
            return 0.0
        return float(self.rates[i])

    def upper_bound(self, t, history):
        i = max(int(np.searchsorted(self.breakpoints, t, side="right")) - 1, 0)
        if i >= len(self.rates):
            return 0.0
        return float(self.rates[i:].max())

    def integral(self, start: float, end: float) -> float:
        """∫ rate over [start, end]."""
        lo = np.clip(self.breakpoints[:-1], start, end)
        hi = np.clip(self.breakpoints[1:], start, end)
        return float(np.sum(self.rates * (hi - lo)))


class FunctionIntensity:
    """
    Wraps plain callables. `bound` is either a constant rate or a callable `(t, history) -> rate`.
    """

    def __init__(self, fn: Callable[[float, Trajectory], float], bound, name: str = "function"):
        self.fn = fn
        self.bound = bound
        self.name = name

    def evaluate(self, t, history):
        return float(self.fn(t, history))

    def upper_bound(self, t, history):
        if callable(self.bound):
            return float(self.bound(t, history))
        return float(self.bound)

    def __repr__(self):
        return f"FunctionIntensity({self.name})"


# ======================================================================================
#                               *** Components & Policies ***
# ======================================================================================

MarkSampler = Callable[[float, Trajectory, np.random.Generator], object]


def no_mark(t, history, rng):
    return ()


def constant_mark(value) -> MarkSampler:
    mark = as_mark(value)
    return lambda t, history, rng: mark


def normal_mark(mean: float, sd: float) -> MarkSampler:
    return lambda t, history, rng: (float(rng.normal(mean, sd)),)


@dataclass(frozen=True)
class Component:
    intensity: IntensityFn
    mark_sampler: MarkSampler = no_mark
    mark_dim: int = 0
    name: str = "component"

    def draw_mark(self, t: float, history: Trajectory, rng) -> tuple:
        mark = as_mark(self.mark_sampler(t, history, rng))
        if len(mark) != self.mark_dim:
            raise SimulationError(
                f"Component '{self.name}' drew a mark of dimension {len(mark)}, expected {self.mark_dim}."
            )
        return mark


@dataclass(frozen=True)
class Policy:
    """
    A treatment policy (λ^a, π).

    With `decision_period` set, treatments can only happen on the grid
    `decision_offset + k * decision_period`, and `intensity.evaluate` gives the
    probability of treating at a grid instant.
    """

    intensity: IntensityFn
    mark_sampler: MarkSampler = no_mark
    mark_dim: int = 0
    name: str = "policy"
    decision_period: float | None = None
    decision_offset: float = 0.0

    def __post_init__(self):
        if self.decision_period is not None and not self.decision_period > 0:
            raise IntensityError(f"Policy '{self.name}' needs a positive decision period.")

    @property
    def is_discrete(self) -> bool:
        return self.decision_period is not None

    def next_decision(self, t: float, strict: bool = True) -> float:
        """First grid instant after t (at or after t when `strict` is False)."""
        if not self.is_discrete:
            return math.inf
        k = math.ceil((t - self.decision_offset) / self.decision_period)
        k = max(k, 0)
        instant = self.decision_offset + k * self.decision_period
        if strict and instant <= t:
            instant = self.decision_offset + (k + 1) * self.decision_period
        return instant

    def decision_instants(self, after: float, before: float) -> list:
        """Grid instants in the open interval (after, before)."""
        out = []
        instant = self.next_decision(after, strict=True)
        while instant < before:
            out.append(instant)
            instant = self.next_decision(instant, strict=True)
        return out

    def treatment_probability(self, t: float, history: Trajectory) -> float:
        p = float(self.intensity.evaluate(t, history))
        if not (0.0 <= p <= 1.0):
            raise IntensityError(f"Policy '{self.name}' returned treatment probability {p!r} at t={t!r}.")
        return p

    def draw_mark(self, t: float, history: Trajectory, rng) -> tuple:
        mark = as_mark(self.mark_sampler(t, history, rng))
        if len(mark) != self.mark_dim:
            raise SimulationError(
                f"Policy '{self.name}' drew a treatment mark of dimension {len(mark)}, expected {self.mark_dim}."
            )
        return mark

    def as_component(self) -> Component:
        return Component(self.intensity, self.mark_sampler, self.mark_dim, self.name)


@dataclass(frozen=True)
class ProcessSpec:
    """A decision point process: feature and outcome components plus a treatment policy."""

    feature: Component
    outcome: Component
    policy: Policy
    horizon: float

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise IntensityError(f"Process horizon must be positive and finite, got {self.horizon!r}.")

    def continuous_components(self) -> list:
        """(kind, component) pairs driven by thinning."""
        pairs = [(EventKind.FEATURE, self.feature), (EventKind.OUTCOME, self.outcome)]
        if not self.policy.is_discrete:
            pairs.append((EventKind.TREATMENT, self.policy.as_component()))
        return pairs

    def with_policy(self, policy: Policy) -> "ProcessSpec":
        return replace(self, policy=policy)

    def sample(self, rng) -> tuple:
        traj = sample_trajectory(self, rng)
        return traj, outcome_total(traj)


def _checked_rate(component: Component, t: float, history: Trajectory, bound: float) -> float:
    rate = float(component.intensity.evaluate(t, history))
    if not math.isfinite(rate):
        raise IntensityError(f"Intensity of component '{component.name}' is not finite at t={t!r}: {rate!r}.")
    if rate < 0:
        raise IntensityError(f"Intensity of component '{component.name}' is negative at t={t!r}: {rate!r}.")
    if rate > bound:
        raise UpperBoundViolation(component.name, t, rate, bound)
    return rate


def _checked_bound(component: Component, t: float, history: Trajectory) -> float:
    bound = float(component.intensity.upper_bound(t, history))
    if not (math.isfinite(bound) and bound >= 0):
        raise IntensityError(f"Upper bound of component '{component.name}' is invalid at t={t!r}: {bound!r}.")
    return bound


# ======================================================================================
#                                   *** Sampling ***
# ======================================================================================

def total_intensity(spec: ProcessSpec, t: float, history: Trajectory) -> float:
    """λ_•(t | H): the sum of the feature, outcome and (continuous) treatment intensities."""
    total = 0.0
    for kind, component in spec.continuous_components():
        rate = float(component.intensity.evaluate(t, history))
        if not math.isfinite(rate) or rate < 0:
            raise IntensityError(f"Component '{component.name}' ({kind.value}) has invalid rate {rate!r} at t={t!r}.")
        total += rate
    return total


def sample_trajectory(spec: ProcessSpec, rng: np.random.Generator) -> Trajectory:
    """
    Draws one trajectory by Ogata thinning.

    Candidates come from a homogeneous process at the summed upper bound; a candidate
    is kept with probability λ_•/M and assigned to a component in proportion to its rate.
    Grid policies are resolved at their decision instants with a Bernoulli draw.
    """
    horizon = spec.horizon
    policy = spec.policy
    components = spec.continuous_components()
    events: list = []
    last = -math.inf
    t = 0.0
    next_decision = policy.next_decision(0.0, strict=False)

    def append(time, kind, mark):
        nonlocal last
        time = separate_tie(last, time)
        events.append(Event(time, kind, mark))
        last = time

    while True:
        history = Trajectory.trusted(events, horizon)
        bounds = [_checked_bound(c, t, history) for _, c in components]
        envelope = sum(bounds)
        candidate = t + rng.exponential(1.0 / envelope) if envelope > 0 else math.inf

        if next_decision < horizon and (
            candidate > next_decision or (candidate == next_decision and rng.random() < 0.5)
        ):
            # the envelope is redrawn from the decision instant on; memorylessness keeps the law
            p = policy.treatment_probability(next_decision, history)
            if rng.random() < p:
                append(next_decision, EventKind.TREATMENT, policy.draw_mark(next_decision, history, rng))
            t = next_decision
            next_decision = policy.next_decision(t, strict=True)
            continue
        if candidate > horizon:
            break

        rates = [_checked_rate(c, candidate, history, b) for (_, c), b in zip(components, bounds)]
        total = sum(rates)
        if rng.random() * envelope < total:
            cumulative = np.cumsum(rates)
            index = min(int(np.searchsorted(cumulative, rng.random() * total, side="right")), len(rates) - 1)
            kind, component = components[index]
            append(candidate, kind, component.draw_mark(candidate, history, rng))
        t = candidate

    return Trajectory.trusted(events, horizon)
