"""
(©) EDQ Lab

Exact ground truth on small discrete-time decision processes.

A history is a tuple of (feature, action) pairs. One step from history h draws a
feature x ~ P(·|h), pays the reward r(h, x), then draws an action from the
observed or target policy at (h, x). Everything here is full enumeration.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from edq.approximator import TabularQ, decode_history_key, encode_history_key
from edq.core_process import Event, EventKind, FunctionIntensity, Policy, Trajectory
from edq.errors import OracleError

logger = logging.getLogger(__name__)

MAX_HORIZON = 5
MAX_VALUES = 3
ROW_TOLERANCE = 1e-12


class Under(str, Enum):
    OBSERVED = "Observed"
    TARGET = "Target"


def _hx_key(history: tuple, x) -> str:
    return f"{encode_history_key(history)}|{x!r}"


@dataclass
class DiscreteProcess:
    """
    Conditional tables of a finite decision process.

    `feature_table[h]` and the policy rows are probability tuples aligned with
    `features` / `actions`; `reward_table[(h, x)]` is the reward paid when x is observed after h.
    """

    horizon: int
    features: tuple
    actions: tuple
    feature_table: dict
    reward_table: dict
    observed_policy: dict
    target_policy: dict
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.features = tuple(int(x) for x in self.features)
        self.actions = tuple(int(a) for a in self.actions)

    # --- table access ---
    def feature_probs(self, history: tuple) -> tuple:
        try:
            return self.feature_table[history]
        except KeyError:
            raise OracleError(f"No feature distribution for history {history!r}.") from None

    def reward(self, history: tuple, x) -> float:
        try:
            return self.reward_table[(history, x)]
        except KeyError:
            raise OracleError(f"No reward for history {history!r} and feature {x!r}.") from None

    def policy_probs(self, history: tuple, x, under: Under) -> tuple:
        table = self.target_policy if under is Under.TARGET else self.observed_policy
        try:
            return table[(history, x)]
        except KeyError:
            raise OracleError(f"No {under.value.lower()} policy row for history {history!r}, feature {x!r}.") from None

    def past_reward(self, history: tuple) -> float:
        return sum(self.reward(history[:i], pair[0]) for i, pair in enumerate(history))

    def histories(self, max_length: int | None = None) -> list:
        """Histories with positive probability under the observed process, shortest first."""
        max_length = self.horizon if max_length is None else max_length
        level = [()]
        out = [()]
        for _ in range(max_length):
            nxt = []
            for h in level:
                for x, px in zip(self.features, self.feature_probs(h)):
                    if px <= 0:
                        continue
                    for a, pa in zip(self.actions, self.policy_probs(h, x, Under.OBSERVED)):
                        if pa > 0:
                            nxt.append(h + ((x, a),))
            out.extend(nxt)
            level = nxt
        return out

    # --- checks ---
    def validate(self) -> "DiscreteProcess":
        if not 1 <= self.horizon <= MAX_HORIZON:
            raise OracleError(f"Horizon must be in 1..{MAX_HORIZON}, got {self.horizon}.")
        if not (1 <= len(self.features) <= MAX_VALUES and 1 <= len(self.actions) <= MAX_VALUES):
            raise OracleError(f"At most {MAX_VALUES} feature and action values are supported.")

        def check_row(row, size, what):
            if len(row) != size:
                raise OracleError(f"{what} has {len(row)} entries, expected {size}.")
            if any(p < 0 for p in row) or abs(math.fsum(row) - 1.0) > ROW_TOLERANCE:
                raise OracleError(f"{what} is not a probability distribution: {row!r}.")

        for h in self.histories(self.horizon - 1):
            check_row(self.feature_probs(h), len(self.features), f"P(x | {h!r})")
            for x in self.features:
                self.reward(h, x)
                obs = self.policy_probs(h, x, Under.OBSERVED)
                tgt = self.policy_probs(h, x, Under.TARGET)
                check_row(obs, len(self.actions), f"π_obs(a | {h!r}, {x!r})")
                check_row(tgt, len(self.actions), f"π(a | {h!r}, {x!r})")
                for a, p_target, p_obs in zip(self.actions, tgt, obs):
                    if p_target > 0 and p_obs <= 0:
                        raise OracleError(f"Overlap violated at ({h!r}, {x!r}): π({a})={p_target} but π_obs({a})=0.")
        return self

    # --- construction ---
    @classmethod
    def from_functions(cls, horizon, features, actions, feature_fn, reward_fn, observed_fn, target_fn) -> "DiscreteProcess":
        """Builds the tables by calling `feature_fn(h)`, `reward_fn(h, x)` and the policy functions on every history."""
        features, actions = tuple(features), tuple(actions)
        ft, rt, ot, tt = {}, {}, {}, {}
        level = [()]
        for _ in range(horizon):
            nxt = []
            for h in level:
                ft[h] = tuple(float(p) for p in feature_fn(h))
                for x in features:
                    rt[(h, x)] = float(reward_fn(h, x))
                    ot[(h, x)] = tuple(float(p) for p in observed_fn(h, x))
                    tt[(h, x)] = tuple(float(p) for p in target_fn(h, x))
                    nxt.extend(h + ((x, a),) for a in actions)
            level = nxt
        return cls(horizon, features, actions, ft, rt, ot, tt)

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "features": list(self.features),
            "actions": list(self.actions),
            "feature_table": {encode_history_key(h): list(row) for h, row in self.feature_table.items()},
            "reward_table": {_hx_key(h, x): r for (h, x), r in self.reward_table.items()},
            "observed_policy": {_hx_key(h, x): list(row) for (h, x), row in self.observed_policy.items()},
            "target_policy": {_hx_key(h, x): list(row) for (h, x), row in self.target_policy.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteProcess":
        def hx(text):
            history, _, x = text.rpartition("|")
            return decode_history_key(history), int(x)

        try:
            proc = cls(
                int(data["horizon"]),
                tuple(data["features"]),
                tuple(data["actions"]),
                {decode_history_key(k): tuple(float(p) for p in v) for k, v in data["feature_table"].items()},
                {hx(k): float(v) for k, v in data["reward_table"].items()},
                {hx(k): tuple(float(p) for p in v) for k, v in data["observed_policy"].items()},
                {hx(k): tuple(float(p) for p in v) for k, v in data["target_policy"].items()},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise OracleError(f"Malformed discrete process description: {e}") from e
        return proc.validate()


def random_process(rng, horizon: int, n_features: int, n_actions: int, concentration: float = 1.0) -> DiscreteProcess:
    """Dirichlet rows everywhere (so overlap holds) and rewards uniform on [0, 1]."""
    alpha_x = np.full(n_features, concentration)
    alpha_a = np.full(n_actions, concentration)

    def row(alpha):
        p = rng.dirichlet(alpha)
        p = np.maximum(p, 1e-3)
        return p / p.sum()

    return DiscreteProcess.from_functions(
        horizon, range(n_features), range(n_actions),
        feature_fn=lambda h: row(alpha_x),
        reward_fn=lambda h, x: rng.uniform(0.0, 1.0),
        observed_fn=lambda h, x: row(alpha_a),
        target_fn=lambda h, x: row(alpha_a),
    ).validate()


# ======================================================================================
#                                 *** Enumeration ***
# ======================================================================================

def _future(proc: DiscreteProcess, history: tuple, under: Under) -> float:
    """E[rewards after `history`] with actions from the chosen policy."""
    key = (under, history)
    cached = proc._cache.get(key)
    if cached is not None:
        return cached
    total = 0.0
    if len(history) < proc.horizon:
        for x, px in zip(proc.features, proc.feature_probs(history)):
            if px == 0:
                continue
            inner = proc.reward(history, x)
            if len(history) + 1 < proc.horizon:
                for a, pa in zip(proc.actions, proc.policy_probs(history, x, under)):
                    if pa:
                        inner += pa * _future(proc, history + ((x, a),), under)
            total += px * inner
    proc._cache[key] = total
    return total


def _check_prefix(proc: DiscreteProcess, prefix: tuple):
    if len(prefix) > proc.horizon:
        raise OracleError(f"Prefix of length {len(prefix)} exceeds horizon {proc.horizon}.")
    for i, (x, a) in enumerate(prefix):
        h = prefix[:i]
        if x not in proc.features or a not in proc.actions:
            raise OracleError(f"Prefix step {i} uses unknown values ({x!r}, {a!r}).")
        px = proc.feature_probs(h)[proc.features.index(x)]
        pa = proc.policy_probs(h, x, Under.OBSERVED)[proc.actions.index(a)]
        if px <= 0 or pa <= 0:
            raise OracleError(f"Prefix {prefix!r} has zero probability under the observed process (step {i}).")


def enumerate_expectation(proc: DiscreteProcess, prefix, under: Under = Under.TARGET) -> float:
    """E[Y | prefix]: past rewards plus the exact expected future rewards."""
    prefix = tuple(tuple(pair) for pair in prefix)
    _check_prefix(proc, prefix)
    return proc.past_reward(prefix) + _future(proc, prefix, Under(under))


def verify_discrete_identity(proc: DiscreteProcess, prefix, d: int) -> tuple:
    """
    (lhs, rhs) of the earliest-disagreement expansion of E_P[Y | prefix] over d steps.

    The right-hand side enumerates (x, a, a_obs) step by step: the first step where the
    target and observed actions differ contributes E_P[Y | ...] at the spliced history,
    and paths that agree for all d steps contribute E_P[Y | ...] after step d.
    """
    prefix = tuple(tuple(pair) for pair in prefix)
    _check_prefix(proc, prefix)
    if not 1 <= d <= proc.horizon - len(prefix):
        raise OracleError(f"d={d} must lie in 1..{proc.horizon - len(prefix)} for a prefix of length {len(prefix)}.")

    def value(h):
        return proc.past_reward(h) + _future(proc, h, Under.TARGET)

    def expand(h, remaining):
        total = 0.0
        for x, px in zip(proc.features, proc.feature_probs(h)):
            if px == 0:
                continue
            target = proc.policy_probs(h, x, Under.TARGET)
            observed = proc.policy_probs(h, x, Under.OBSERVED)
            for (a, pa), (a_obs, po) in itertools.product(zip(proc.actions, target), zip(proc.actions, observed)):
                weight = px * pa * po
                if weight == 0:
                    continue
                spliced = h + ((x, a),)
                if a != a_obs or remaining == 1:
                    total += weight * value(spliced)
                else:
                    total += weight * expand(spliced, remaining - 1)
        return total

    lhs = enumerate_expectation(proc, prefix, Under.TARGET)
    return lhs, expand(prefix, d)


# ======================================================================================
#                                  *** Fixed points ***
# ======================================================================================

def _next_value(q: TabularQ, proc: DiscreteProcess, history: tuple) -> float:
    return 0.0 if len(history) >= proc.horizon else q.value(history)


def edq_backup(proc: DiscreteProcess, q: TabularQ, history: tuple, memo: dict | None = None) -> float:
    """
    Expected EDQ label at `history` under bootstrap values q.

    Agreement continues along the trajectory; the first disagreement bootstraps q at
    the history carrying the target action.
    """
    memo = {} if memo is None else memo
    if history in memo:
        return memo[history]
    total = 0.0
    for x, px in zip(proc.features, proc.feature_probs(history)):
        if px == 0:
            continue
        inner = proc.reward(history, x)
        target = proc.policy_probs(history, x, Under.TARGET)
        observed = proc.policy_probs(history, x, Under.OBSERVED)
        for a, pa, po in zip(proc.actions, target, observed):
            if pa == 0:
                continue
            nxt = history + ((x, a),)
            if len(nxt) >= proc.horizon:
                continue
            inner += pa * ((1.0 - po) * q.value(nxt) + po * edq_backup(proc, q, nxt, memo))
        total += px * inner
    memo[history] = total
    return total


def fqe_backup(proc: DiscreteProcess, q: TabularQ, history: tuple) -> float:
    """One-step tower backup r + Q(h, x, a ~ π)."""
    total = 0.0
    for x, px in zip(proc.features, proc.feature_probs(history)):
        if px == 0:
            continue
        inner = proc.reward(history, x)
        for a, pa in zip(proc.actions, proc.policy_probs(history, x, Under.TARGET)):
            if pa:
                inner += pa * _next_value(q, proc, history + ((x, a),))
        total += px * inner
    return total


def _terminal_table(proc: DiscreteProcess) -> TabularQ:
    q = TabularQ()
    q.ensure(proc.histories(), default=0.0)
    return q


def edq_fixed_point(proc: DiscreteProcess) -> TabularQ:
    """The unique self-consistent tabular Q, by backward induction from Q(H_T) = 0."""
    q = _terminal_table(proc)
    memo: dict = {}
    for history in sorted(q.keys(), key=len, reverse=True):
        if len(history) < proc.horizon:
            q.set(history, edq_backup(proc, q, history, memo))
    return q


def fqe_fixed_point(proc: DiscreteProcess) -> TabularQ:
    q = _terminal_table(proc)
    for history in sorted(q.keys(), key=len, reverse=True):
        if len(history) < proc.horizon:
            q.set(history, fqe_backup(proc, q, history))
    return q


def self_consistency_residual(proc: DiscreteProcess, q: TabularQ) -> tuple:
    """(max |q(h) − backup(h)|, worst history) over all non-terminal histories."""
    worst, worst_history = 0.0, None
    memo: dict = {}
    for history in q.keys():
        if len(history) >= proc.horizon:
            continue
        gap = abs(q.value(history) - edq_backup(proc, q, history, memo))
        if gap > worst:
            worst, worst_history = gap, history
    return worst, worst_history


def target_values(proc: DiscreteProcess) -> TabularQ:
    """E_P[Y | h] minus past rewards at every observed-reachable history."""
    q = TabularQ()
    for history in proc.histories():
        q.set(history, _future(proc, history, Under.TARGET))
    return q


# ======================================================================================
#                                   *** Sampling ***
# ======================================================================================

def _draw(rng, values: tuple, probs: tuple):
    u = rng.random()
    cumulative = 0.0
    for value, p in zip(values, probs):
        cumulative += p
        if u < cumulative:
            return value
    return next(v for v, p in zip(reversed(values), reversed(probs)) if p > 0)


def sample_episode(proc: DiscreteProcess, rng, under: Under = Under.OBSERVED, prefix=()) -> tuple:
    """Completes `prefix` to the horizon; returns (history, rewards per step)."""
    history = tuple(tuple(p) for p in prefix)
    rewards = [proc.reward(history[:i], pair[0]) for i, pair in enumerate(history)]
    while len(history) < proc.horizon:
        x = _draw(rng, proc.features, proc.feature_probs(history))
        rewards.append(proc.reward(history, x))
        a = _draw(rng, proc.actions, proc.policy_probs(history, x, under))
        history = history + ((x, a),)
    return history, rewards


def sample_history(proc: DiscreteProcess, length: int, rng, under: Under = Under.OBSERVED) -> tuple:
    history, _ = sample_episode(proc, rng, under)
    return history[:length]


def draw_action(proc: DiscreteProcess, history: tuple, x, under: Under, rng):
    return _draw(rng, proc.actions, proc.policy_probs(history, x, under))


# ======================================================================================
#                          *** Embedding as point-process events ***
# ======================================================================================

def as_trajectory(proc: DiscreteProcess, history, null_action=None) -> Trajectory:
    """
    Step s becomes Feature at s − 0.5, Outcome at s − 0.25 and Treatment at s.
    An action equal to `null_action` leaves no treatment event.
    """
    events = []
    history = tuple(tuple(p) for p in history)
    for i, (x, a) in enumerate(history):
        s = i + 1
        events.append(Event(s - 0.5, EventKind.FEATURE, (float(x),)))
        events.append(Event(s - 0.25, EventKind.OUTCOME, (proc.reward(history[:i], x),)))
        if a != null_action:
            events.append(Event(float(s), EventKind.TREATMENT, (float(a),)))
    return Trajectory(events, proc.horizon)


def history_from_trajectory(traj: Trajectory, null_action=0, upto: float | None = None) -> tuple:
    """
    Inverse of `as_trajectory`: the (x, a) pairs of steps s <= upto.

    A completed step without a treatment event carries `null_action`.
    """
    upto = traj.horizon if upto is None else upto
    features = {int(round(e.time + 0.5)): int(e.value) for e in traj.events if e.kind is EventKind.FEATURE}
    treatments = {int(round(e.time)): int(e.value) for e in traj.events if e.kind is EventKind.TREATMENT}
    return tuple((features[s], treatments.get(s, null_action)) for s in sorted(features) if s <= upto)


def table_policy(proc: DiscreteProcess, under: Under, null_action=0) -> Policy:
    """
    A grid policy treating at integer instants with the table's probability of a non-null action.

    Only binary action spaces map onto treat / do-not-treat.
    """
    if len(proc.actions) != 2 or null_action not in proc.actions:
        raise OracleError("Table policies need a binary action space containing the null action.")
    treat = next(a for a in proc.actions if a != null_action)
    index = proc.actions.index(treat)

    def probability(u, history):
        step = int(round(u))
        feature = history.last_of_kind(EventKind.FEATURE)
        if feature is None or int(round(feature.time + 0.5)) != step:
            raise OracleError(f"No feature observed for decision step {step}.")
        past = history_from_trajectory(history, null_action, upto=step - 1)
        return proc.policy_probs(past, int(feature.value), under)[index]

    return Policy(
        intensity=FunctionIntensity(probability, bound=1.0, name=f"table-{under.value.lower()}"),
        mark_sampler=lambda t, history, rng: (float(treat),),
        mark_dim=1,
        name=f"table-{under.value.lower()}",
        decision_period=1.0,
        decision_offset=1.0,
    )
