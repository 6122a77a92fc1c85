import numpy as np
import pytest

from mlrnet import core
from mlrnet.ensemble import (EnsembleSpec, Member, ensemble_predict, select_members,
                             train_ensemble)
from mlrnet.errors import ConfigError, EmptyEnsemble, TrainingError
from mlrnet.training import TrainRecord


def _constant_member(index, value, score=0.0, task="reg"):
    """A depth-1 model on a single constant feature that always predicts ``value``."""
    model = core.TrainedModel(core.ModelParams([], []), task, np.array([float(value)]))
    return Member(index, index, 1, model, TrainRecord(val_scores=[score]))


def _ones(m):
    return np.ones((m, 1))


def test_specs():
    assert EnsembleSpec.bag(1).depths == (1,) * 10
    assert EnsembleSpec.pool().depths == (1,) * 10 + (2,) * 10
    assert EnsembleSpec.parse("bag2").depths == (2,) * 10
    assert EnsembleSpec.parse("single", depth=3).depths == (3,)
    assert EnsembleSpec.parse("top5").kind == "top5"
    with pytest.raises(ConfigError):
        EnsembleSpec.parse("stack")
    with pytest.raises(ConfigError):
        EnsembleSpec("bag", (5,))


def test_mean_of_members():
    a = core.TrainedModel(core.ModelParams([], []), "reg", np.array([1.0, 0.0]))
    b = core.TrainedModel(core.ModelParams([], []), "reg", np.array([0.0, 1.0]))
    x = np.array([[1.0, 3.0], [3.0, 1.0]]).T   # member a predicts (1, 3), b predicts (3, 1)
    np.testing.assert_array_equal(ensemble_predict([a, b], x, "bag"), [2.0, 2.0])


def test_best_picks_highest_validation():
    members = [_constant_member(i, v, s) for i, (v, s) in enumerate([(10, 0.5), (20, 0.9), (30, 0.7)])]
    np.testing.assert_array_equal(ensemble_predict(members, _ones(2), "best"), [20.0, 20.0])


def test_best_ties_to_lowest_index():
    members = [_constant_member(i, 10 * i, s) for i, s in enumerate([0.3, 0.8, 0.8])]
    assert select_members(members, "best")[0].index == 1


def test_top5_matches_sort_oracle():
    rng = np.random.default_rng(0)
    scores = rng.permutation(np.arange(1, 13) / 10)
    values = rng.standard_normal(12)
    members = [_constant_member(i, v, s) for i, (v, s) in enumerate(zip(values, scores))]
    top = sorted(range(12), key=lambda i: scores[i])[-5:]
    want = np.mean(values[top])
    assert ensemble_predict(members, _ones(1), "top5")[0] == pytest.approx(want, abs=1e-15)


def test_best_within_top5():
    rng = np.random.default_rng(1)
    members = [_constant_member(i, i, s) for i, s in enumerate(rng.random(20))]
    best = select_members(members, "best")[0].index
    assert best in {m.index for m in select_members(members, "top5")}


def test_bag_permutation_invariant():
    rng = np.random.default_rng(2)
    members = [_constant_member(i, v) for i, v in enumerate(rng.standard_normal(7))]
    a = ensemble_predict(members, _ones(3), "bag")
    b = ensemble_predict(members[::-1], _ones(3), "bag")
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_classification_averages_probabilities():
    members = [_constant_member(0, 3.0, task="clf"), _constant_member(1, -1.0, task="clf")]
    proba = ensemble_predict(members, _ones(1), "bag", output="proba")
    want = (1 / (1 + np.exp(-3.0)) + 1 / (1 + np.exp(1.0))) / 2
    assert proba[0] == pytest.approx(want)
    assert ensemble_predict(members, _ones(1), "bag")[0] == int(want > 0.5)


def test_empty_ensemble():
    with pytest.raises(EmptyEnsemble):
        ensemble_predict([], _ones(1), "bag")


def _data(n=50, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    y = x[:, 0] - x[:, 1] + 0.3 * rng.standard_normal(n)
    return x, (y - y.mean()) / y.std()


CFG = core.MlrConfig(width=16, max_iter=5, budget_seconds=None)


def test_train_bag_members_and_seeds():
    x, y = _data()
    ens = train_ensemble(EnsembleSpec.bag(1, members=4), CFG, x, y, master_seed=7)
    assert [m.seed for m in ens.members] == [7, 8, 9, 10]
    assert all(m.depth == 1 and m.ok for m in ens.members)
    # each member draws its own validation split
    assert len({tuple(m.record.val_idx) for m in ens.members}) > 1


def test_pool_depths():
    x, y = _data()
    ens = train_ensemble(EnsembleSpec.pool(), CFG.with_(max_iter=1), x, y)
    assert [m.depth for m in ens.members] == [1] * 10 + [2] * 10


def test_same_master_seed_identical():
    x, y = _data()
    spec = EnsembleSpec.bag(2, members=3)
    a = train_ensemble(spec, CFG, x, y, master_seed=3).predict(x)
    b = train_ensemble(spec, CFG, x, y, master_seed=3).predict(x)
    np.testing.assert_array_equal(a, b)


def test_majority_failure_raises():
    x = np.zeros((4, 2))   # too few rows for a validation split: every member fails
    with pytest.raises(TrainingError):
        train_ensemble(EnsembleSpec.bag(1, members=3), CFG, x, np.zeros(4))


@pytest.mark.slow
def test_bagging_reduces_variance():
    rng = np.random.default_rng(5)
    cfg = core.MlrConfig(depth=2, width=64, max_iter=60, budget_seconds=None)
    xte = rng.standard_normal((200, 3))
    single, bagged = [], []
    for rep in range(20):
        x, y = _data(60, seed=100 + rep)
        ens = train_ensemble(EnsembleSpec.bag(2, members=5), cfg, x, y, master_seed=rep)
        single.append(ensemble_predict(ens.trained[:1], xte, "bag"))
        bagged.append(ens.predict(xte))
    # spread of predictions across repeats, averaged over test points
    assert np.std(bagged, axis=0).mean() <= np.std(single, axis=0).mean()
