import json

import numpy as np
import pytest

from edq.approximator import (
    FeatureConfig,
    FeaturizedQ,
    MlpQ,
    TabularQ,
    TargetCopy,
    check_gradient,
    checkpoint_payload,
    decode_history_key,
    embed_time,
    encode_history_key,
    featurize,
    q_from_checkpoint,
    q_grad_step,
    q_value,
)
from edq.core_process import Event, EventKind, Trajectory
from edq.errors import ArtifactError, ConfigError, TabularKeyError, TrainingDivergence


def _history() -> Trajectory:
    return Trajectory([
        Event(0.5, EventKind.FEATURE, (3.0,)),
        Event(1.0, EventKind.OUTCOME, (2.0,)),
    ], horizon=4.0)


def test_time_embedding_values() -> None:
    assert embed_time(0.0, 4).tolist() == [0.0, 1.0, 0.0, 1.0]
    emb = embed_time(2.0, 4, base=100.0)
    assert emb[0] == pytest.approx(np.sin(2.0))
    assert emb[3] == pytest.approx(np.cos(2.0 / 10.0))
    with pytest.raises(ConfigError):
        embed_time(1.0, 3)
    with pytest.raises(ValueError):
        embed_time(-1.0, 4)


def test_featurize_layout() -> None:
    cfg = FeatureConfig(history_k=2, time_dim=4, mark_dim=1)
    assert cfg.slot_dim == 10
    assert cfg.dim == 33
    x = featurize(_history(), 1.5, cfg)
    assert x.shape == (33,)
    np.testing.assert_allclose(x[4:8], embed_time(0.5, 4))
    # most recent event first: the outcome, then the feature
    assert x[8 + 1] == 1.0 and x[8 + 4] == 2.0 and x[17] == 1.0
    assert x[18 + 0] == 1.0 and x[18 + 4] == 3.0 and x[27] == 1.0
    assert x[28:32].tolist() == [1.0, 1.0, 0.0, 0.0]
    assert x[-1] == 2.0


def test_featurize_pads_missing_slots_and_rejects_future_events() -> None:
    cfg = FeatureConfig(history_k=3, time_dim=4, mark_dim=1)
    x = featurize(Trajectory([], 4.0), 0.0, cfg)
    assert not x[8: 8 + 3 * cfg.slot_dim].any()
    with pytest.raises(ValueError):
        featurize(_history(), 0.7, cfg)


def test_featurize_rejects_marks_wider_than_the_slot() -> None:
    history = Trajectory([Event(0.5, EventKind.TREATMENT, (1.0, 0.0))], horizon=4.0)
    with pytest.raises(ConfigError, match="mark_dim"):
        featurize(history, 1.0, FeatureConfig(history_k=2, time_dim=4, mark_dim=1))
    x = featurize(history, 1.0, FeatureConfig(history_k=2, time_dim=4, mark_dim=2))
    assert np.isfinite(x).all()


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_backprop_matches_finite_differences(activation, rng) -> None:
    model = MlpQ(5, (8, 8), activation, rng=rng)
    x = rng.normal(size=(4, 5))
    y = rng.normal(size=4)
    assert check_gradient(model, x, y) < 1e-5


def test_grad_steps_reduce_the_loss(rng) -> None:
    model = MlpQ(3, (8,), step_size=0.05, rng=rng)
    x = rng.normal(size=(8, 3))
    y = np.ones(8)
    first = model.grad_step(x, y)
    for _ in range(200):
        last = model.grad_step(x, y)
    assert last < first
    assert model.steps == 201


def test_non_finite_batch_raises_divergence(rng) -> None:
    model = MlpQ(3, (4,), rng=rng)
    with pytest.raises(TrainingDivergence) as info:
        model.grad_step(np.full((2, 3), np.nan), np.zeros(2))
    assert "loss" in info.value.diagnostics


def test_mlp_serialisation_is_exact(rng) -> None:
    model = MlpQ(4, (6, 5), "softplus", momentum=0.9, output_scale=3.0, rng=rng)
    model.grad_step(rng.normal(size=(2, 4)), np.zeros(2))
    restored = MlpQ.from_dict(json.loads(json.dumps(model.to_dict())))
    assert np.array_equal(restored.get_params(), model.get_params())
    x = rng.normal(size=(5, 4))
    assert np.array_equal(restored.predict(x), model.predict(x))
    assert restored.steps == 1


def test_tabular_missing_key_is_an_error() -> None:
    q = TabularQ({(): 1.0, ((0, 1),): 2.0})
    assert q.value(((0.0, 1.0),)) == 2.0
    with pytest.raises(TabularKeyError):
        q.value(((1, 1),))
    with pytest.raises(KeyError):
        q.value(((1, 1),))


def test_history_keys() -> None:
    assert encode_history_key(()) == ""
    assert encode_history_key(((0, 1), (1, 0))) == "0,1;1,0"
    assert decode_history_key("0,1;1,0") == ((0, 1), (1, 0))
    assert decode_history_key("0.5,1") == ((0.5, 1),)


def test_target_copy_soft_update(rng) -> None:
    source = MlpQ(3, (4,), rng=rng)
    copy = TargetCopy(MlpQ(3, (4,), rng=rng), 0.25)
    before = copy.get_params()
    copy.update(source)
    np.testing.assert_allclose(copy.get_params(), 0.25 * source.get_params() + 0.75 * before)
    for tau in (0.0, 1.5):
        with pytest.raises(ConfigError):
            TargetCopy(source, tau)


def test_checkpoint_round_trip(rng) -> None:
    q = FeaturizedQ.build(FeatureConfig(history_k=2, time_dim=4, mark_dim=1), hidden_sizes=(4,), rng=rng)
    restored = q_from_checkpoint(json.loads(json.dumps(checkpoint_payload(q, {"iterations": 7}))))
    assert isinstance(restored, FeaturizedQ)
    assert restored.value(_history(), 2.0) == q.value(_history(), 2.0)

    table = TabularQ({(): 1.5, ((1, 0),): -0.5})
    assert q_from_checkpoint(checkpoint_payload(table)).items() == table.items()


def test_checkpoint_header_is_checked() -> None:
    table = TabularQ({(): 1.0})
    with pytest.raises(ArtifactError):
        q_from_checkpoint({**checkpoint_payload(table), "format": "pickle"})
    with pytest.raises(ArtifactError):
        q_from_checkpoint({**checkpoint_payload(table), "version": 2})
    with pytest.raises(ArtifactError):
        q_from_checkpoint({**checkpoint_payload(table), "kind": "forest"})


def test_model_and_features_must_agree(rng) -> None:
    with pytest.raises(ConfigError):
        FeaturizedQ(MlpQ(5, (4,), rng=rng), FeatureConfig(history_k=1, time_dim=4, mark_dim=1))


def test_generic_value_and_step_helpers(rng) -> None:
    table = TabularQ({(): 1.5, ((1, 0),): -0.5})
    assert q_value(table, ((1, 0),)) == -0.5
    model = MlpQ(3, (4,), step_size=0.0, rng=rng)
    x = rng.normal(size=3)
    assert q_value(model, x) == model(x)
    loss = q_grad_step(model, x[None, :], np.array([model(x) + 2.0]))
    assert loss == pytest.approx(4.0)
    assert model.steps == 1
