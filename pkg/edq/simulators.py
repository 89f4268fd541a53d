"""
(©) EDQ Lab

Synthetic environments.

- Time to failure: a vital drops linearly with per-unit noise; treatments raise it.
- Tumor growth: a Gompertz-type finite-difference model with chemo and radiotherapy.

Both draw their treatments from a core `Policy`, so the same rule can be evaluated
as a target policy on observed histories.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.special import expit

from edq.core_process import Event, EventKind, FunctionIntensity, Policy, Trajectory, separate_tie
from edq.errors import ConfigError, SimulationError

logger = logging.getLogger(__name__)


def _from_overrides(cls, base, overrides: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"Unknown {where} parameter(s): {', '.join(unknown)}")
    return replace(base, **overrides)


# ======================================================================================
#                                 *** Time to failure ***
# ======================================================================================

@dataclass(frozen=True)
class FailureSimParams:
    alpha: float = 0.5
    noise_sd: float = 0.1
    dose_noise_sd: float | None = None  # None: 5% of the effect constant
    threshold: float = 10.0
    rate: float = 0.5
    max_treatments: int = 5
    initial_vital: float = 20.0
    effect: float | None = None  # None: half the initial vital
    obs_period: float = 1.0
    horizon: float = 150.0

    def __post_init__(self):
        if not self.initial_vital > 0:
            raise ConfigError(f"initial_vital must be positive, got {self.initial_vital!r}.")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha!r}.")
        if self.noise_sd < 0 or (self.dose_noise_sd is not None and self.dose_noise_sd < 0):
            raise ConfigError("Noise scales must be nonnegative.")
        if not self.rate > 0:
            raise ConfigError(f"Treatment rate must be positive, got {self.rate!r}.")
        if self.max_treatments < 1:
            raise ConfigError("max_treatments must be at least 1.")
        if not (self.obs_period > 0 and self.horizon > 0):
            raise ConfigError("obs_period and horizon must be positive.")

    @property
    def effect_constant(self) -> float:
        return self.initial_vital / 2.0 if self.effect is None else float(self.effect)

    @property
    def dose_sd(self) -> float:
        return 0.05 * self.effect_constant if self.dose_noise_sd is None else float(self.dose_noise_sd)


def make_failure_policy(rate: float, threshold: float, max_treatments: int = 5,
                        effect: float = 10.0, dose_noise_sd: float = 0.0) -> Policy:
    """
    Constant hazard `rate` while a below-threshold measurement awaits treatment.

    A measurement below `threshold` after the last treatment opens the wait; a
    treatment or the outcome closes it, and nothing happens after `max_treatments`.
    The k-th treatment carries dose effect/k plus Gaussian noise.
    """
    if not rate > 0:
        raise ConfigError(f"Failure policy rate must be positive, got {rate!r}.")

    def pending(history: Trajectory) -> bool:
        n_treated = 0
        waiting = False
        for event in history.events:
            if event.kind is EventKind.OUTCOME:
                return False
            if event.kind in (EventKind.TREATMENT, EventKind.OBSERVED_TREATMENT):
                n_treated += 1
                waiting = False
            elif event.kind is EventKind.FEATURE and event.value < threshold:
                waiting = True
        return waiting and n_treated < max_treatments

    def intensity(t, history):
        return rate if pending(history) else 0.0

    def dose(t, history, rng):
        k = history.count(EventKind.TREATMENT, EventKind.OBSERVED_TREATMENT) + 1
        noise = rng.normal(0.0, dose_noise_sd) if dose_noise_sd > 0 else 0.0
        return (effect / k + noise,)

    return Policy(
        intensity=FunctionIntensity(intensity, bound=rate, name="failure-threshold"),
        mark_sampler=dose,
        mark_dim=1,
        name=f"failure(rate={rate})",
    )


def failure_policy_from_params(params: FailureSimParams, rate: float | None = None) -> Policy:
    return make_failure_policy(
        params.rate if rate is None else rate,
        params.threshold,
        params.max_treatments,
        params.effect_constant,
        params.dose_sd,
    )


def simulate_patient(params: FailureSimParams, rng, policy: Policy | None = None) -> tuple:
    """
    One patient: (trajectory, failure time).

    The vital falls with slope α + ξ, ξ redrawn every time unit. Measurements are
    Feature events; treatment times come from the policy's hazard, redrawn after every
    event since the hazard is constant between events. The single Outcome event sits at
    the failure time, or at the horizon if the patient survives.
    """
    policy = failure_policy_from_params(params) if policy is None else policy
    horizon = float(params.horizon)
    events: list = []
    vital = float(params.initial_vital)
    t = 0.0

    def slope_draw():
        xi = rng.normal(0.0, params.noise_sd) if params.noise_sd > 0 else 0.0
        return params.alpha + xi

    slope = slope_draw()
    next_noise = 1.0
    next_obs = 0.0
    next_treat = math.inf
    obs_index = 0

    def reschedule(now):
        history = Trajectory.trusted(events, horizon)
        hazard = policy.intensity.evaluate(float(np.nextafter(now, math.inf)), history)
        if not (math.isfinite(hazard) and hazard >= 0):
            raise SimulationError(f"Treatment hazard {hazard!r} is invalid at t={now!r}.")
        return now + rng.exponential(1.0 / hazard) if hazard > 0 else math.inf

    while True:
        nxt = min(next_noise, next_obs, next_treat, horizon)
        if slope > 0 and vital - slope * (nxt - t) <= 0:
            failure = t + vital / slope
            if failure <= horizon:
                failure = separate_tie(events[-1].time if events else -math.inf, failure)
                events.append(Event(failure, EventKind.OUTCOME, (failure,)))
                return Trajectory.trusted(events, horizon), failure
        vital -= slope * (nxt - t)
        t = nxt
        if not math.isfinite(vital):
            raise SimulationError(f"Vital became non-finite at t={t!r}.")
        if t >= horizon:
            events.append(Event(horizon, EventKind.OUTCOME, (horizon,)))
            return Trajectory.trusted(events, horizon), horizon
        if t == next_noise:
            slope = slope_draw()
            next_noise += 1.0
        if t == next_obs:
            events.append(Event(t, EventKind.FEATURE, (vital,)))
            obs_index += 1
            next_obs = obs_index * params.obs_period
            next_treat = reschedule(t)
        elif t == next_treat:
            history = Trajectory.trusted(events, horizon)
            mark = policy.draw_mark(t, history, rng)
            vital += mark[0]
            events.append(Event(t, EventKind.TREATMENT, mark))
            next_treat = reschedule(t)


@dataclass(frozen=True)
class FailureSimulator:
    params: FailureSimParams
    policy: Policy

    @classmethod
    def build(cls, params: FailureSimParams, rate: float | None = None) -> "FailureSimulator":
        return cls(params, failure_policy_from_params(params, rate))

    @property
    def horizon(self) -> float:
        return float(self.params.horizon)

    def with_policy(self, policy: Policy) -> "FailureSimulator":
        return replace(self, policy=policy)

    def sample(self, rng) -> tuple:
        return simulate_patient(self.params, rng, self.policy)


# ======================================================================================
#                                   *** Tumor growth ***
# ======================================================================================

@dataclass(frozen=True)
class TumorSimParams:
    rho: float = 0.1
    carrying_capacity: float = 2.0
    beta_c: float = 0.03
    alpha_r: float = 0.03
    beta_r: float | None = None  # None: alpha_r / 10
    noise_sd: float = 0.01
    gamma: float = 10.0
    beta: float = 0.5
    lookback: int = 15
    v_max: float = 1.0
    horizon: int = 20
    initial_volume: float = 0.5
    chemo_dose: float = 5.0
    radio_dose: float = 2.0
    prior_sd: float = 0.1  # log-normal spread of the per-patient coefficients

    def __post_init__(self):
        if not self.carrying_capacity > 0:
            raise ConfigError("carrying_capacity must be positive.")
        if not (isinstance(self.horizon, int) and self.horizon > 0):
            raise ConfigError("Tumor horizon must be a positive integer.")
        if self.lookback < 1:
            raise ConfigError("lookback must be at least 1.")
        if not (self.initial_volume > 0 and self.v_max > 0):
            raise ConfigError("initial_volume and v_max must be positive.")
        if self.noise_sd < 0 or self.prior_sd < 0:
            raise ConfigError("Noise scales must be nonnegative.")

    def draw_coefficients(self, rng) -> dict:
        """Per-patient (rho, K, beta_c, alpha_r, beta_r), log-normal around the configured values."""
        def jitter(value):
            return value * math.exp(rng.normal(0.0, self.prior_sd)) if self.prior_sd > 0 else value

        alpha_r = jitter(self.alpha_r)
        beta_r = alpha_r / 10.0 if self.beta_r is None else jitter(self.beta_r)
        return {
            "rho": jitter(self.rho),
            "carrying_capacity": jitter(self.carrying_capacity),
            "beta_c": jitter(self.beta_c),
            "alpha_r": alpha_r,
            "beta_r": beta_r,
        }


def tumor_treat_probability(gamma: float, beta: float, v_last: float, step: float, last_step: float) -> float:
    """Per-therapy probability σ(γ(v_last − β) + t − t_last)."""
    return float(expit(gamma * (v_last - beta) + step - last_step))


def make_tumor_policy(gamma: float, beta: float) -> Policy:
    """
    Decides at s + 0.5 for every step s; chemo and radio are each given with the
    same probability p, so some treatment happens with probability 1 − (1 − p)².
    Marks are (chemo, radio) indicators conditioned on at least one being 1.
    """

    def per_therapy(t, history):
        feature = history.last_of_kind(EventKind.FEATURE)
        if feature is None:
            raise SimulationError(f"Tumor policy needs an observed volume before t={t!r}.")
        treated = history.last_of_kind(EventKind.TREATMENT, EventKind.OBSERVED_TREATMENT)
        last_step = math.floor(treated.time) if treated is not None else 0
        return tumor_treat_probability(gamma, beta, feature.value, math.floor(t), last_step)

    def any_treatment(t, history):
        p = per_therapy(t, history)
        return 1.0 - (1.0 - p) ** 2

    def therapies(t, history, rng):
        p = per_therapy(t, history)
        q = 1.0 - (1.0 - p) ** 2
        if q <= 0:
            raise SimulationError(f"Tumor treatment drawn with zero probability at t={t!r}.")
        u = rng.random() * q
        both = p * p
        if u < both:
            return (1.0, 1.0)
        if u < both + p * (1.0 - p):
            return (1.0, 0.0)
        return (0.0, 1.0)

    return Policy(
        intensity=FunctionIntensity(any_treatment, bound=1.0, name="tumor-sigmoid"),
        mark_sampler=therapies,
        mark_dim=2,
        name=f"tumor(gamma={gamma}, beta={beta})",
        decision_period=1.0,
        decision_offset=0.5,
    )


def simulate_tumor(params: TumorSimParams, rng, policy_override: tuple | None = None,
                   policy: Policy | None = None) -> tuple:
    """
    One patient: (trajectory, final volume).

    Step s observes V_s (always at s = 0, otherwise with probability
    σ(mean of the `lookback` volumes before V_s / v_max − 1.5)), decides at s + 0.5, then
    V_{s+1} = V_s (1 + ρ log(K/V_s) − β_c C − α_r d − β_r d² + e) with C halving each step.
    The Outcome event at the horizon carries V_T.
    """
    if policy is None:
        gamma, beta = policy_override if policy_override is not None else (params.gamma, params.beta)
        policy = make_tumor_policy(gamma, beta)
    coef = params.draw_coefficients(rng)
    horizon = params.horizon
    events: list = []
    volumes = [float(params.initial_volume)]
    concentration = 0.0

    for step in range(horizon):
        volume = volumes[-1]
        if step == 0:
            observe = True
        else:
            recent = volumes[-params.lookback - 1:-1]
            observe = rng.random() < expit(np.mean(recent) / params.v_max - 1.5)
        if observe:
            events.append(Event(float(step), EventKind.FEATURE, (volume,)))

        decision = step + 0.5
        history = Trajectory.trusted(events, horizon)
        chemo, radio = 0.0, 0.0
        if rng.random() < policy.treatment_probability(decision, history):
            mark = policy.draw_mark(decision, history, rng)
            chemo, radio = mark
            events.append(Event(decision, EventKind.TREATMENT, mark))

        concentration = concentration / 2.0 + params.chemo_dose * chemo
        dose = params.radio_dose * radio
        noise = rng.normal(0.0, params.noise_sd) if params.noise_sd > 0 else 0.0
        growth = coef["rho"] * math.log(coef["carrying_capacity"] / volume)
        therapy = coef["beta_c"] * concentration + coef["alpha_r"] * dose + coef["beta_r"] * dose * dose
        nxt = volume * (1.0 + growth - therapy + noise)
        if not math.isfinite(nxt) or nxt <= 0:
            raise SimulationError(f"Tumor volume left the valid range at step {step + 1}: {nxt!r}.")
        volumes.append(nxt)

    final = volumes[-1]
    events.append(Event(float(horizon), EventKind.OUTCOME, (final,)))
    return Trajectory.trusted(events, horizon), final


@dataclass(frozen=True)
class TumorSimulator:
    params: TumorSimParams
    policy: Policy

    @classmethod
    def build(cls, params: TumorSimParams, gamma: float | None = None, beta: float | None = None) -> "TumorSimulator":
        return cls(params, make_tumor_policy(
            params.gamma if gamma is None else gamma,
            params.beta if beta is None else beta,
        ))

    @property
    def horizon(self) -> float:
        return float(self.params.horizon)

    def with_policy(self, policy: Policy) -> "TumorSimulator":
        return replace(self, policy=policy)

    def sample(self, rng) -> tuple:
        return simulate_tumor(self.params, rng, policy=self.policy)


# ======================================================================================
#                                     *** Presets ***
# ======================================================================================

PRESETS = {
    # lengths 10 to 100, up to 5 treatments
    "failure-long": FailureSimParams(alpha=0.5, noise_sd=0.1, threshold=10.0, rate=0.5, max_treatments=5,
                                     initial_vital=20.0, effect=10.0, horizon=150.0),
    # lengths 3 to 10, a single treatment
    "failure-short": FailureSimParams(alpha=2.0, noise_sd=0.1, threshold=6.0, rate=2.0, max_treatments=1,
                                      initial_vital=10.0, effect=5.0, horizon=20.0),
    "tumor": TumorSimParams(),
}


def preset_params(preset: str, overrides: dict | None = None):
    try:
        base = PRESETS[preset]
    except KeyError:
        raise ConfigError(f"Unknown simulator preset '{preset}'. Choose from {sorted(PRESETS)}.") from None
    return _from_overrides(type(base), base, dict(overrides or {}), preset)


def build_policy(preset: str, params, policy_params: dict | None = None) -> Policy:
    """Policy for a preset from `{"rate": ...}` (failure) or `{"gamma": ..., "beta": ...}` (tumor)."""
    policy_params = dict(policy_params or {})
    if preset.startswith("failure"):
        unknown = set(policy_params) - {"rate"}
        if unknown:
            raise ConfigError(f"Unknown failure policy parameter(s): {sorted(unknown)}")
        return failure_policy_from_params(params, policy_params.get("rate"))
    if preset == "tumor":
        unknown = set(policy_params) - {"gamma", "beta"}
        if unknown:
            raise ConfigError(f"Unknown tumor policy parameter(s): {sorted(unknown)}")
        return make_tumor_policy(policy_params.get("gamma", params.gamma), policy_params.get("beta", params.beta))
    raise ConfigError(f"Preset '{preset}' has no point-process policy.")


def build_source(preset: str, overrides: dict | None = None, policy_params: dict | None = None):
    """A simulator with `.sample(rng) -> (trajectory, Y)` under the given policy."""
    params = preset_params(preset, overrides)
    policy = build_policy(preset, params, policy_params)
    if preset == "tumor":
        return TumorSimulator(params, policy)
    return FailureSimulator(params, policy)


def describe_policy(preset: str, policy_params: dict | None, params=None) -> str:
    """Short label used in results tables, e.g. `0.5` or `(10,0.5)`."""
    policy_params = dict(policy_params or {})
    params = params if params is not None else preset_params(preset)
    if preset == "tumor":
        return f"({policy_params.get('gamma', params.gamma)},{policy_params.get('beta', params.beta)})"
    return f"{policy_params.get('rate', params.rate)}"


def params_dict(params) -> dict:
    return asdict(params)
