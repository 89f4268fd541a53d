"""
(©) EDQ Lab

Q-function machinery.

- `embed_time` / `featurize`: fixed-length vectors from (history, time).
- `MlpQ`: small float64 feed-forward regressor with exact backpropagation.
- `TabularQ`: exact map for enumerable discrete histories.
- `TargetCopy`: the slowly tracking shadow parameters used for bootstrapped labels.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from edq.core_process import EventKind, Trajectory
from edq.errors import ArtifactError, ConfigError, TabularKeyError, TrainingDivergence

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "edq-checkpoint"
CHECKPOINT_VERSION = 1

_KIND_ORDER = (EventKind.FEATURE, EventKind.OUTCOME, EventKind.TREATMENT, EventKind.OBSERVED_TREATMENT)


# ======================================================================================
#                                  *** Featurization ***
# ======================================================================================

def embed_time(t: float, dim: int, base: float = 1e5) -> np.ndarray:
    """Sinusoidal time embedding: sin(t·C^(−k/d)) at even k, cos(t·C^(−(k−1)/d)) at odd k."""
    if dim <= 0 or dim % 2:
        raise ConfigError(f"Time embedding dimension must be a positive even integer, got {dim}.")
    if t < 0:
        raise ValueError(f"Time embedding needs t >= 0, got {t!r}.")
    exponents = np.arange(0, dim, 2, dtype=float) / dim
    angles = t * np.power(float(base), -exponents)
    out = np.empty(dim)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


@dataclass(frozen=True)
class FeatureConfig:
    history_k: int = 16
    time_dim: int = 16
    time_base: float = 1e5
    mark_dim: int = 2
    mark_scale: float = 1.0
    count_scale: float = 1.0
    outcome_scale: float = 1.0

    def __post_init__(self):
        if self.time_dim <= 0 or self.time_dim % 2:
            raise ConfigError(f"time_dim must be a positive even integer, got {self.time_dim}.")
        if self.history_k < 0 or self.mark_dim <= 0:
            raise ConfigError("history_k must be >= 0 and mark_dim > 0.")

    @property
    def slot_dim(self) -> int:
        return len(_KIND_ORDER) + self.mark_dim + self.time_dim + 1

    @property
    def dim(self) -> int:
        return 2 * self.time_dim + self.history_k * self.slot_dim + len(_KIND_ORDER) + 1

    def to_dict(self) -> dict:
        return asdict(self)


def featurize(history: Trajectory, t: float, cfg: FeatureConfig) -> np.ndarray:
    """
    Layout: embed(t) | embed(t − last event time) | K slots, most recent first |
    per-kind counts | running outcome sum.

    A slot is (kind one-hot, mark padded to mark_dim, embed(event time), presence flag);
    missing slots are all zeros.
    """
    events = history.events
    if events and events[-1].time > t:
        raise ValueError(f"History has events after t={t!r}.")
    d = cfg.time_dim
    out = np.zeros(cfg.dim)
    out[:d] = embed_time(t, d, cfg.time_base)
    last = events[-1].time if events else 0.0
    out[d:2 * d] = embed_time(t - last, d, cfg.time_base)

    offset = 2 * d
    n_kinds = len(_KIND_ORDER)
    for event in events[::-1][: cfg.history_k]:
        slot = out[offset: offset + cfg.slot_dim]
        slot[_KIND_ORDER.index(event.kind)] = 1.0
        mark = event.mark
        if len(mark) > cfg.mark_dim:
            raise ConfigError(
                f"{event.kind.value} event at t={event.time!r} has a mark of dimension {len(mark)}, "
                f"but features.mark_dim is {cfg.mark_dim}."
            )
        slot[n_kinds: n_kinds + len(mark)] = np.asarray(mark, dtype=float) * cfg.mark_scale
        slot[n_kinds + cfg.mark_dim: n_kinds + cfg.mark_dim + d] = embed_time(event.time, d, cfg.time_base)
        slot[-1] = 1.0
        offset += cfg.slot_dim
    offset = 2 * d + cfg.history_k * cfg.slot_dim

    outcome = 0.0
    for event in events:
        out[offset + _KIND_ORDER.index(event.kind)] += cfg.count_scale
        if event.kind is EventKind.OUTCOME:
            outcome += event.value
    out[-1] = outcome * cfg.outcome_scale
    return out


# ======================================================================================
#                                   *** MLP regressor ***
# ======================================================================================

def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)


def _activate_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return expit(z)


class MlpQ:
    """
    Feed-forward regressor `x -> output_scale * f(x)` trained on mean squared error.

    Weights are float64 with Glorot-uniform initialisation; `grad_step` is plain or
    momentum SGD and returns the loss before the step.
    """

    def __init__(self, input_dim: int, hidden_sizes=(64, 64), activation: str = "tanh",
                 step_size: float = 1e-3, momentum: float = 0.0, output_scale: float = 1.0, rng=None):
        if activation not in ("tanh", "softplus"):
            raise ConfigError(f"Unknown activation '{activation}'.")
        if input_dim <= 0 or any(h <= 0 for h in hidden_sizes):
            raise ConfigError("Layer sizes must be positive.")
        self.sizes = [int(input_dim), *(int(h) for h in hidden_sizes), 1]
        self.activation = activation
        self.step_size = float(step_size)
        self.momentum = float(momentum)
        self.output_scale = float(output_scale)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.velocity = [np.zeros_like(p) for p in self._params()]
        self.steps = 0

    def _params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self._params())

    # --- forward / backward ---
    def _forward(self, x: np.ndarray):
        pre, post = [], [x]
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            a = z if i == last else _activate(self.activation, z)
            post.append(a)
        return a[:, 0] * self.output_scale, pre, post

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self._forward(x)[0]

    def __call__(self, x) -> float:
        return float(self.predict(x)[0])

    def loss_and_grads(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if x.shape[0] != y.shape[0] or x.shape[1] != self.input_dim:
            raise ValueError(f"Batch shapes {x.shape} / {y.shape} do not match input dim {self.input_dim}.")
        f, pre, post = self._forward(x)
        residual = f - y
        loss = float(np.mean(residual * residual))
        delta = (2.0 / len(y)) * residual[:, None] * self.output_scale
        grads_w, grads_b = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w.append(post[i].T @ delta)
            grads_b.append(delta.sum(axis=0))
            if i > 0:
                delta = (delta @ self.weights[i].T) * _activate_grad(self.activation, pre[i - 1], post[i])
        grads = []
        for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
            grads.extend((gw, gb))
        return loss, grads

    def grad_step(self, x, y, step: float | None = None) -> float:
        """One squared-loss SGD step on the batch; returns the pre-step loss."""
        loss, grads = self.loss_and_grads(x, y)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergence("Non-finite loss or gradient", {
                "loss": loss,
                "step": self.steps,
                "grad_norm": float(math.sqrt(sum(float(np.sum(g * g)) for g in grads))),
                "max_abs_param": float(max(np.max(np.abs(p)) for p in self._params())),
            })
        lr = self.step_size if step is None else float(step)
        for param, grad, vel in zip(self._params(), grads, self.velocity):
            if self.momentum:
                vel *= self.momentum
                vel += grad
                param -= lr * vel
            else:
                param -= lr * grad
        self.steps += 1
        return loss

    # --- flat parameter access ---
    def get_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._params()])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"Expected {self.n_params} parameters, got {flat.size}.")
        offset = 0
        for param in self._params():
            param[...] = flat[offset: offset + param.size].reshape(param.shape)
            offset += param.size

    def copy(self) -> "MlpQ":
        return MlpQ.from_dict(self.to_dict())

    # --- checkpoint ---
    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "sizes": list(self.sizes),
            "activation": self.activation,
            "step_size": self.step_size,
            "momentum": self.momentum,
            "output_scale": self.output_scale,
            "steps": self.steps,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "velocity": [v.tolist() for v in self.velocity],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpQ":
        try:
            sizes = data["sizes"]
            model = cls.__new__(cls)
            model.sizes = [int(s) for s in sizes]
            model.activation = data["activation"]
            model.step_size = float(data["step_size"])
            model.momentum = float(data["momentum"])
            model.output_scale = float(data["output_scale"])
            model.steps = int(data.get("steps", 0))
            model.weights = [np.asarray(w, dtype=float).reshape(i, o) for w, i, o in zip(data["weights"], sizes[:-1], sizes[1:])]
            model.biases = [np.asarray(b, dtype=float).reshape(o) for b, o in zip(data["biases"], sizes[1:])]
            velocity = data.get("velocity")
            if velocity is None:
                model.velocity = [np.zeros_like(p) for p in model._params()]
            else:
                model.velocity = [np.asarray(v, dtype=float).reshape(p.shape) for v, p in zip(velocity, model._params())]
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"Malformed MLP checkpoint: {e}") from e
        return model


def check_gradient(model: MlpQ, x, y, eps: float = 1e-6) -> float:
    """Relative error ‖g − g_fd‖ / (‖g‖ + ‖g_fd‖) between backprop and central differences."""
    _, grads = model.loss_and_grads(x, y)
    analytic = np.concatenate([g.ravel() for g in grads])
    theta = model.get_params()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + eps
        model.set_params(bumped)
        plus = model.loss_and_grads(x, y)[0]
        bumped[i] = theta[i] - eps
        model.set_params(bumped)
        minus = model.loss_and_grads(x, y)[0]
        numeric[i] = (plus - minus) / (2.0 * eps)
    model.set_params(theta)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


# ======================================================================================
#                                   *** Tabular Q ***
# ======================================================================================

def canonical_key(key) -> tuple:
    """Nested sequences of numbers as nested tuples of Python ints/floats."""
    if isinstance(key, (list, tuple)):
        return tuple(canonical_key(k) for k in key)
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key)
    if isinstance(key, (float, np.floating)):
        value = float(key)
        return int(value) if value.is_integer() else value
    raise TypeError(f"Unsupported key element {key!r}.")


def encode_history_key(key: tuple) -> str:
    """((x, a), (x, a)) -> 'x,a;x,a'; the root history is ''."""
    return ";".join(",".join(repr(v) for v in pair) for pair in key)


def decode_history_key(text: str) -> tuple:
    if text == "":
        return ()
    pairs = []
    for chunk in text.split(";"):
        pairs.append(tuple(canonical_key(float(v)) for v in chunk.split(",")))
    return tuple(pairs)


class TabularQ:
    """Exact values on canonical history keys. Reading a missing key is an error."""

    def __init__(self, values: dict | None = None):
        self._values = {}
        for key, value in (values or {}).items():
            self.set(key, value)

    def value(self, key) -> float:
        canon = canonical_key(key)
        try:
            return self._values[canon]
        except KeyError:
            raise TabularKeyError(f"TabularQ has no entry for history {canon!r}.") from None

    __call__ = value

    def set(self, key, value: float) -> None:
        self._values[canonical_key(key)] = float(value)

    def ensure(self, keys, default: float = 0.0) -> None:
        for key in keys:
            self._values.setdefault(canonical_key(key), float(default))

    def keys(self) -> list:
        return sorted(self._values, key=lambda k: (len(k), k))

    def items(self) -> list:
        return [(k, self._values[k]) for k in self.keys()]

    def __contains__(self, key):
        return canonical_key(key) in self._values

    def __len__(self):
        return len(self._values)

    def get_params(self) -> np.ndarray:
        return np.array([self._values[k] for k in self.keys()], dtype=float)

    def set_params(self, flat) -> None:
        keys = self.keys()
        flat = np.asarray(flat, dtype=float)
        if flat.size != len(keys):
            raise ValueError(f"Expected {len(keys)} values, got {flat.size}.")
        for key, value in zip(keys, flat):
            self._values[key] = float(value)

    def copy(self) -> "TabularQ":
        out = TabularQ()
        out._values = dict(self._values)
        return out

    def max_abs_diff(self, other: "TabularQ") -> float:
        return max((abs(v - other.value(k)) for k, v in self._values.items()), default=0.0)

    def to_dict(self) -> dict:
        return {"kind": "tabular", "values": {encode_history_key(k): v for k, v in self.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "TabularQ":
        try:
            return cls({decode_history_key(k): v for k, v in data["values"].items()})
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ArtifactError(f"Malformed tabular checkpoint: {e}") from e


# ======================================================================================
#                               *** Target copy & helpers ***
# ======================================================================================

class TargetCopy:
    """Shadow parameters θ′ updated as θ′ ← τθ + (1−τ)θ′."""

    def __init__(self, source, tau: float):
        if not 0.0 < tau <= 1.0:
            raise ConfigError(f"Soft-update rate must lie in (0, 1], got {tau!r}.")
        self.tau = float(tau)
        self.model = source.copy()

    def update(self, source) -> None:
        theta = source.get_params()
        shadow = self.model.get_params()
        self.model.set_params(self.tau * theta + (1.0 - self.tau) * shadow)

    def get_params(self) -> np.ndarray:
        return self.model.get_params()


class FeaturizedQ:
    """An `MlpQ` behind the history featurizer: `value(history, t)`."""

    def __init__(self, model: MlpQ, features: FeatureConfig):
        if model.input_dim != features.dim:
            raise ConfigError(f"Model input dim {model.input_dim} does not match feature dim {features.dim}.")
        self.model = model
        self.features = features

    @classmethod
    def build(cls, features: FeatureConfig, hidden_sizes=(64, 64), activation="tanh", step_size=1e-3,
              momentum=0.0, output_scale=1.0, rng=None) -> "FeaturizedQ":
        model = MlpQ(features.dim, hidden_sizes, activation, step_size, momentum, output_scale, rng)
        return cls(model, features)

    def featurize(self, history: Trajectory, t: float) -> np.ndarray:
        return featurize(history, t, self.features)

    def value(self, history: Trajectory, t: float) -> float:
        return self.model(self.featurize(history, t))

    def values(self, prefixes) -> np.ndarray:
        """Predictions for a list of (history, t) pairs."""
        if not prefixes:
            return np.zeros(0)
        return self.model.predict(np.stack([self.featurize(h, t) for h, t in prefixes]))

    def get_params(self) -> np.ndarray:
        return self.model.get_params()

    def set_params(self, flat) -> None:
        self.model.set_params(flat)

    def copy(self) -> "FeaturizedQ":
        return FeaturizedQ(self.model.copy(), self.features)

    def to_dict(self) -> dict:
        return {**self.model.to_dict(), "features": self.features.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "FeaturizedQ":
        try:
            features = FeatureConfig(**data["features"])
        except (KeyError, TypeError) as e:
            raise ArtifactError(f"Checkpoint is missing its feature config: {e}") from e
        return cls(MlpQ.from_dict(data), features)


def q_value(q, x) -> float:
    """Q at a feature vector (MlpQ) or a history key (TabularQ)."""
    if isinstance(q, TabularQ):
        return q.value(x)
    return q(x)


def q_grad_step(q: MlpQ, features, label, step: float | None = None) -> float:
    return q.grad_step(features, label, step)


def soft_update(q, copy: TargetCopy) -> None:
    copy.update(q)


def checkpoint_payload(q, extra: dict | None = None) -> dict:
    """Versioned checkpoint dict for a FeaturizedQ or TabularQ."""
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **q.to_dict(), **(extra or {})}


def q_from_checkpoint(data: dict):
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ArtifactError("Not an EDQ checkpoint.")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ArtifactError(f"Unsupported checkpoint version {data.get('version')!r}.")
    if data.get("kind") == "tabular":
        return TabularQ.from_dict(data)
    if data.get("kind") == "mlp":
        return FeaturizedQ.from_dict(data)
    raise ArtifactError(f"Unknown checkpoint kind {data.get('kind')!r}.")
