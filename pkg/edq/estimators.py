"""
(©) EDQ Lab

Training procedures sharing one data model and approximator:

- EDQ: bootstrap at the earliest disagreement between observed and target treatments.
- Discretized FQE: bootstrap one grid step forward with a resampled target treatment.
- ERM: regress every prefix on the trajectory's own outcome.
- Tabular EDQ / FQE on the oracle's discrete processes.

EDQ and FQE learn Q(H_t), the expected outcome still to come; ERM learns the total.
`Predictor` turns either into total-outcome predictions.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from edq import oracle
from edq.approximator import FeatureConfig, FeaturizedQ, TabularQ, TargetCopy, soft_update
from edq.core_process import Event, EventKind, Policy, Trajectory, outcome_sum, outcome_total, separate_tie
from edq.disagreement import Boundary, sample_augmented
from edq.errors import ConfigError, EdqError

logger = logging.getLogger(__name__)

ESTIMATORS = ("edq", "fqe", "erm", "edq-tabular")
TIME_SAMPLERS = ("uniform", "active", "events")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 1
    step_size: float = 1e-3
    momentum: float = 0.0
    tau: float = 0.01
    time_sampling: str = "uniform"
    fqe_step: float = 1.0
    seed: int = 0
    hidden_sizes: tuple = (64, 64)
    activation: str = "tanh"
    output_scale: float = 1.0
    log_every: int = 1000
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive.")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive.")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1].")
        if not self.fqe_step > 0:
            raise ConfigError("fqe_step must be positive.")
        if self.time_sampling not in TIME_SAMPLERS:
            raise ConfigError(f"time_sampling must be one of {TIME_SAMPLERS}, got '{self.time_sampling}'.")


@dataclass(frozen=True)
class Dataset:
    """Trajectories drawn under the observed policy, with their outcomes."""

    trajectories: tuple
    outcomes: tuple

    def __post_init__(self):
        if len(self.trajectories) != len(self.outcomes):
            raise ConfigError("Dataset needs one outcome per trajectory.")
        horizons = {traj.horizon for traj in self.trajectories}
        if len(horizons) > 1:
            raise ConfigError(f"Dataset trajectories have different horizons: {sorted(horizons)}.")

    @classmethod
    def from_pairs(cls, pairs) -> "Dataset":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(float(p[1]) for p in pairs))

    @classmethod
    def sample(cls, source, n: int, rng) -> "Dataset":
        return cls.from_pairs(source.sample(rng) for _ in range(n))

    @property
    def m(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> float:
        return self.trajectories[0].horizon

    def __len__(self):
        return self.m


@dataclass
class DiagnosticRow:
    iteration: int
    loss: float
    mean_label: float
    mean_delta: float
    frac_horizon: float


@dataclass
class TrainResult:
    estimator: str
    q: object
    target: TargetCopy | None = None
    diagnostics: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    iterations: int = 0
    visits: dict = field(default_factory=dict)  # tabular mode: updates per history key

    def predictor(self) -> "Predictor":
        return Predictor(self.estimator, self.q)


class Predictor:
    """Total-outcome predictions at (history, t) prefixes."""

    def __init__(self, estimator: str, q: FeaturizedQ):
        self.estimator = estimator
        self.q = q

    def predict(self, prefixes) -> np.ndarray:
        values = self.q.values(prefixes)
        if self.estimator == "erm":
            return values
        past = np.array([outcome_total(history) for history, _ in prefixes])
        return values + past


# ======================================================================================
#                                  *** Time samplers ***
# ======================================================================================

def sample_time(traj: Trajectory, rng, how: str = "uniform") -> float:
    """An update time in [0, T): uniform, uniform up to the last event ('active'), or an event time."""
    horizon = traj.horizon
    if how == "uniform":
        return float(rng.uniform(0.0, horizon))
    if how == "active":
        end = traj.last_time
        end = horizon if end is None or end <= 0 else min(end, horizon)
        return float(rng.uniform(0.0, end))
    if how == "events":
        times = [0.0] + [e.time for e in traj.events if e.time < horizon]
        return float(times[int(rng.integers(len(times)))])
    raise ConfigError(f"Unknown time sampler '{how}'.")


# ======================================================================================
#                                     *** Labels ***
# ======================================================================================

def edq_draw(traj: Trajectory, t: float, target: Policy, q_target, rng) -> tuple:
    """(label, δ, boundary) for one augmented draw; `q_target(history, time)` bootstraps."""
    sample = sample_augmented(traj, target, t, rng, lazy=True)
    spliced = sample.spliced()
    label = outcome_sum(spliced, t)
    if sample.boundary is not Boundary.HORIZON_REACHED:
        label += float(q_target(spliced, sample.end))
    return label, sample.delta, sample.boundary


def edq_label(traj: Trajectory, t: float, target: Policy, q_target, rng) -> float:
    """
    Outcomes in (t, t+δ] of the spliced history, plus Q at the spliced history unless
    the window reached the horizon.
    """
    return edq_draw(traj, t, target, q_target, rng)[0]


def treatment_probability_in_cell(base: Trajectory, target: Policy, start: float, end: float) -> float:
    """
    Probability that the target treats in (start, end] when evaluated on the observed history:
    1 − exp(−∫λ) for rate policies, 1 − Π(1 − p) over grid instants for grid policies.
    """
    if target.is_discrete:
        keep = 1.0
        for u in target.decision_instants(start, base.horizon):
            if u > end:
                break
            keep *= 1.0 - target.treatment_probability(u, base.before(u))
        return 1.0 - keep
    cuts = [start] + [e.time for e in base.window(start, end) if e.time < end] + [end]
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        history = base.before(b)
        value, _ = quad(lambda u: target.intensity.evaluate(u, history), a, b, limit=50)
        total += value
    return 1.0 - math.exp(-total)


def fqe_draw(traj: Trajectory, t: float, step: float, target: Policy, q_target, rng) -> tuple:
    """
    (label, δ, boundary) for the one-step-forward FQE label on the cell (t, t+h].

    The next history keeps the observed features and outcomes of the cell, drops its
    observed treatments, and gets a target treatment at the cell end with the cell's
    discretized treatment probability.
    """
    horizon = traj.horizon
    end = min(t + step, horizon)
    label = outcome_sum(traj.history(end), t)
    if end >= horizon:
        return label, end - t, Boundary.HORIZON_REACHED
    kept = [e for e in traj.window(t, end) if e.kind in (EventKind.FEATURE, EventKind.OUTCOME)]
    events = list(traj.history(t).events) + kept
    query = end
    boundary = Boundary.OBSERVED_TREATS
    p = treatment_probability_in_cell(traj, target, t, end)
    if rng.random() < p:
        history = Trajectory.trusted(events, horizon)
        mark = target.draw_mark(end, history, rng)
        query = separate_tie(events[-1].time if events else -math.inf, end)
        events.append(Event(query, EventKind.TREATMENT, mark))
        boundary = Boundary.TARGET_TREATS
    label += float(q_target(Trajectory.trusted(events, horizon), query))
    return label, end - t, boundary


def edq_label_discrete(proc, episode: tuple, step: int, q_target, rng) -> float:
    """
    Discrete-time EDQ label from step `step` of an observed episode (history, rewards):
    rewards until the first step whose target action differs from the observed one,
    plus Q at the history carrying the target action there.
    """
    history, rewards = episode
    label = 0.0
    for j in range(step, proc.horizon):
        x, a_obs = history[j]
        prefix = history[:j]
        label += rewards[j]
        if j + 1 == proc.horizon:
            break
        a = oracle.draw_action(proc, prefix, x, oracle.Under.TARGET, rng)
        if a != a_obs:
            return label + q_target(prefix + ((x, a),))
    return label


def fqe_label_discrete(proc, episode: tuple, step: int, q_target, rng) -> float:
    history, rewards = episode
    x, _ = history[step]
    label = rewards[step]
    if step + 1 < proc.horizon:
        a = oracle.draw_action(proc, history[:step], x, oracle.Under.TARGET, rng)
        label += q_target(history[:step] + ((x, a),))
    return label


# ======================================================================================
#                                   *** Training loops ***
# ======================================================================================

def _new_q(cfg: TrainConfig, rng) -> FeaturizedQ:
    return FeaturizedQ.build(cfg.features, cfg.hidden_sizes, cfg.activation, cfg.step_size,
                             cfg.momentum, cfg.output_scale, rng)


def _train_loop(estimator: str, data: Dataset, cfg: TrainConfig, draw, rng, resume: TrainResult | None,
                init_rng) -> TrainResult:
    if data.m == 0:
        raise ConfigError("Training needs a nonempty dataset.")
    if resume is not None:
        q, target = resume.q, resume.target
        result = TrainResult(estimator, q, target, list(resume.diagnostics), list(resume.losses), resume.iterations)
    else:
        q = _new_q(cfg, init_rng)
        target = TargetCopy(q, cfg.tau)
        result = TrainResult(estimator, q, target)

    start = result.iterations
    window_loss, window_label, window_delta, window_horizon, window_n = 0.0, 0.0, 0.0, 0, 0
    for iteration in range(start + 1, start + cfg.iterations + 1):
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            index = int(rng.integers(data.m))
            traj = data.trajectories[index]
            t = sample_time(traj, rng, cfg.time_sampling)
            label, delta, boundary = draw(index, t, target.model.value, rng)
            xs.append(q.featurize(traj.history(t), t))
            ys.append(label)
            window_label += label
            window_delta += delta
            window_horizon += boundary is Boundary.HORIZON_REACHED
            window_n += 1
        try:
            loss = q.model.grad_step(np.stack(xs), np.asarray(ys))
        except EdqError as e:
            logger.error(f"[{estimator}] training diverged at iteration {iteration}: {e}")
            raise
        soft_update(q, target)
        result.losses.append(loss)
        window_loss += loss
        result.iterations = iteration

        if iteration % cfg.log_every == 0 or iteration == start + cfg.iterations:
            steps = iteration - (result.diagnostics[-1].iteration if result.diagnostics else start)
            row = DiagnosticRow(
                iteration=iteration,
                loss=window_loss / max(steps, 1),
                mean_label=window_label / max(window_n, 1),
                mean_delta=window_delta / max(window_n, 1),
                frac_horizon=window_horizon / max(window_n, 1),
            )
            result.diagnostics.append(row)
            logger.info(
                f"[{estimator}] iter {iteration}/{start + cfg.iterations} loss={row.loss:.5g} "
                f"mean label={row.mean_label:.4g} mean δ={row.mean_delta:.4g} horizon share={row.frac_horizon:.2f}"
            )
            window_loss, window_label, window_delta, window_horizon, window_n = 0.0, 0.0, 0.0, 0, 0
    return result


def train_edq(data: Dataset, target: Policy, cfg: TrainConfig, rng=None, resume: TrainResult | None = None,
              init_rng=None) -> TrainResult:
    """Random (trajectory, time), EDQ label from the target copy, one step, soft update."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    init_rng = init_rng if init_rng is not None else np.random.default_rng([cfg.seed, 1])

    def draw(index, t, q_target, r):
        return edq_draw(data.trajectories[index], t, target, q_target, r)

    return _train_loop("edq", data, cfg, draw, rng, resume, init_rng)


def train_fqe_discretized(data: Dataset, target: Policy, cfg: TrainConfig, rng=None,
                          resume: TrainResult | None = None, init_rng=None) -> TrainResult:
    """FQE on the grid {0, h, 2h, ...}: updates happen at grid times only."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    init_rng = init_rng if init_rng is not None else np.random.default_rng([cfg.seed, 1])
    step = cfg.fqe_step
    horizon = data.horizon if data.m else 0.0
    n_cells = max(1, math.ceil(horizon / step - 1e-12))

    def draw(index, t, q_target, r):
        g = min(int(t // step), n_cells - 1) * step
        return fqe_draw(data.trajectories[index], g, step, target, q_target, r)

    return _train_loop("fqe", data, cfg, draw, rng, resume, init_rng)


def train_erm(data: Dataset, cfg: TrainConfig, rng=None, resume: TrainResult | None = None,
              init_rng=None) -> TrainResult:
    """Monte-Carlo prediction: every prefix regressed on its own trajectory's outcome."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    init_rng = init_rng if init_rng is not None else np.random.default_rng([cfg.seed, 1])
    def draw(index, t, q_target, r):
        return data.outcomes[index], data.horizon - t, Boundary.HORIZON_REACHED

    return _train_loop("erm", data, cfg, draw, rng, resume, init_rng)


def fit(estimator: str, data: Dataset, target: Policy, cfg: TrainConfig, rng=None, resume=None,
        init_rng=None) -> TrainResult:
    if estimator == "edq":
        return train_edq(data, target, cfg, rng, resume, init_rng)
    if estimator == "fqe":
        return train_fqe_discretized(data, target, cfg, rng, resume, init_rng)
    if estimator == "erm":
        return train_erm(data, cfg, rng, resume, init_rng)
    raise ConfigError(f"Estimator '{estimator}' does not train on point-process data.")


# ======================================================================================
#                                   *** Tabular mode ***
# ======================================================================================

def train_edq_tabular(proc, episodes, iterations: int, rng=None, rule: str = "edq", exact: bool = False,
                      q: TabularQ | None = None, log_every: int = 10_000, visits: dict | None = None) -> TrainResult:
    """
    Tabular Q on a discrete process.

    `exact` runs expectation-form sweeps of the backup to its fixed point. Otherwise each
    update draws an episode and a step uniformly, builds a sampled label from the live
    table and moves that key by 1/n of the gap, n being its visit count. `visits` carries
    the counts over from an earlier run.
    """
    if rule not in ("edq", "fqe"):
        raise ConfigError(f"Unknown tabular rule '{rule}'.")
    q = q.copy() if q is not None else TabularQ()
    q.ensure(proc.histories(), default=0.0)
    interior = [h for h in q.keys() if len(h) < proc.horizon]
    result = TrainResult(f"{rule}-tabular", q)

    if exact:
        for sweep in range(proc.horizon + 1):
            memo: dict = {}  # valid while q is frozen for the sweep
            if rule == "edq":
                fresh = {h: oracle.edq_backup(proc, q, h, memo) for h in interior}
            else:
                fresh = {h: oracle.fqe_backup(proc, q, h) for h in interior}
            change = max((abs(v - q.value(h)) for h, v in fresh.items()), default=0.0)
            for h, v in fresh.items():
                q.set(h, v)
            result.diagnostics.append(DiagnosticRow(sweep + 1, change, float(np.mean(list(fresh.values()))), 0.0, 0.0))
            result.iterations = sweep + 1
            if change == 0.0:
                break
        return result

    episodes = list(episodes)
    if not episodes:
        raise ConfigError("Sampled tabular training needs episodes.")
    rng = rng if rng is not None else np.random.default_rng(0)
    label_fn = edq_label_discrete if rule == "edq" else fqe_label_discrete
    counts = dict(visits or {})
    result.visits = counts
    window = []
    for iteration in range(1, iterations + 1):
        episode = episodes[int(rng.integers(len(episodes)))]
        step = int(rng.integers(proc.horizon))
        key = episode[0][:step]
        label = label_fn(proc, episode, step, q.value, rng)
        n = counts.get(key, 0) + 1
        counts[key] = n
        current = q.value(key)
        q.set(key, current + (label - current) / n)
        window.append((label - current) ** 2)
        if iteration % log_every == 0 or iteration == iterations:
            row = DiagnosticRow(iteration, float(np.mean(window)), 0.0, 0.0, 0.0)
            result.diagnostics.append(row)
            logger.info(f"[{rule}-tabular] iter {iteration}/{iterations} squared gap={row.loss:.5g}")
            window = []
        result.iterations = iteration
    return result
