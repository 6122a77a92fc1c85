import math

import numpy as np
import pytest

from mlrnet import autograd as ad
from mlrnet import core, linalg
from mlrnet.errors import ConfigError, DegenerateClass, NotFinalized, ShapeMismatch

from oracles import (bce_mlr_loss_straight, brute_force_lambda, forward_loop, lambda_grid_loop,
                     mlr_loss_straight, ridge_normal_equations, svd_hat)


# configuration
@pytest.mark.parametrize("depth,lr,iters", [(1, 1e-2, 200), (2, 1e-3, 200),
                                            (3, 10 ** -3.5, 400), (4, 1e-4, 400)])
def test_depth_table(depth, lr, iters):
    cfg = core.MlrConfig(depth=depth)
    assert cfg.lr == lr and cfg.iterations == iters


def test_config_defaults():
    cfg = core.MlrConfig()
    assert (cfg.width, cfg.n_permutations, cfg.sigma_struct) == (1024, 16, 1.0)
    assert cfg.dither == 0.03 and cfg.budget_seconds == 300
    assert core.MlrConfig(task="clf").dither == 0.0
    assert core.MlrConfig(task="clf", label_dither=0.5).dither == 0.0
    assert cfg.batch_for(100) == 100 and cfg.batch_for(5000) == 1024


@pytest.mark.parametrize("bad", [dict(depth=5), dict(depth=0), dict(task="multi"), dict(width=0),
                                 dict(n_permutations=-1), dict(sigma_struct=-1.0),
                                 dict(val_fraction=1.0), dict(head="tree")])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        core.MlrConfig(**bad)


# initialisation and forward pass
def test_init_bounds_first_layer():
    p = core.init_weights(8, 4, 2, seed=0)
    bound = math.sqrt(6 / 12)
    assert bound == pytest.approx(0.7071, abs=1e-4)
    assert np.abs(p.weights[0]).max() <= bound
    assert all(np.all(b == 0) for b in p.biases)


def test_init_bounds_hidden_layer():
    p = core.init_weights(2, 2, 3, seed=0)
    assert core.glorot_bound(2, 2) == pytest.approx(1.2247, abs=1e-4)
    big = core.init_weights(2, 256, 3, seed=1)
    w = big.weights[1]
    assert np.abs(w).max() <= core.glorot_bound(256, 256)
    # uniform on the interval: sample max close to the bound
    assert np.abs(w).max() > 0.99 * core.glorot_bound(256, 256)
    assert p.weights[1].shape == (2, 2)


def test_init_deterministic():
    a = core.init_weights(5, 7, 3, seed=11)
    b = core.init_weights(5, 7, 3, seed=11)
    for k, v in a.as_dict().items():
        np.testing.assert_array_equal(v, b.as_dict()[k])


def test_depth_one_has_no_hidden_layer():
    p = core.init_weights(3, 16, 1, seed=0)
    x = np.arange(6.0).reshape(2, 3)
    assert p.weights == []
    np.testing.assert_array_equal(core.forward_hidden(p, x), x)


def test_forward_zero_network():
    p = core.init_weights(3, 4, 3, seed=0)
    p.weights = [np.zeros_like(w) for w in p.weights]
    assert np.all(core.forward_hidden(p, np.ones((5, 3))) == 0)


def test_forward_identity_on_nonnegative():
    p = core.ModelParams([np.eye(3)], [np.zeros(3)])
    x = np.abs(np.random.default_rng(0).standard_normal((4, 3)))
    np.testing.assert_array_equal(core.forward_hidden(p, x), x)


def test_forward_matches_loop_oracle():
    p = core.init_weights(3, 4, 3, seed=5)
    p.biases = [np.random.default_rng(1).standard_normal(4) * 0.1 for _ in p.biases]
    x = np.random.default_rng(2).standard_normal((6, 3))
    np.testing.assert_allclose(core.forward_hidden(p, x), forward_loop(p.weights, p.biases, x),
                               rtol=0, atol=1e-14)


def test_forward_taped_equals_plain():
    p = core.init_weights(3, 5, 3, seed=5)
    x = np.random.default_rng(2).standard_normal((6, 3))
    tape = ad.Tape()
    pv = {k: tape.param(v, k) for k, v in p.as_dict().items()}
    np.testing.assert_array_equal(core.forward_hidden_taped(pv, x).value, core.forward_hidden(p, x))


def test_forward_shape_mismatch():
    p = core.init_weights(3, 4, 2, seed=0)
    with pytest.raises(ShapeMismatch):
        core.forward_hidden(p, np.ones((2, 5)))


# prediction
def test_predict_requires_finalize():
    with pytest.raises(NotFinalized):
        core.TrainedModel(core.init_weights(2, 3, 2, seed=0)).predict(np.ones((1, 2)))


def test_predict_interpolates_at_tiny_lambda():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 40))
    Y = rng.standard_normal(10)
    p = core.init_weights(40, 40, 1, seed=0)
    p.log_lambda = math.log(1e-12)
    model = core.finalize(p, x, Y)
    assert np.linalg.norm(model.predict(x) - Y) / np.linalg.norm(Y) < 1e-4


def test_zero_output_weights_predict_zero():
    model = core.TrainedModel(core.init_weights(2, 3, 2, seed=0), w_out=np.zeros(3))
    assert np.all(model.predict(np.ones((4, 2))) == 0)


def test_depth_one_is_plain_ridge():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 5))
    y = rng.standard_normal(20)
    p = core.init_weights(5, 8, 1, seed=0)
    p.log_lambda = math.log(0.3)
    w = core.output_weights(p, x, y)
    np.testing.assert_allclose(w, ridge_normal_equations(x, y, 0.3), rtol=0, atol=1e-8)


def test_classification_predicts_labels_and_probabilities():
    model = core.TrainedModel(core.ModelParams([], []), task="clf", w_out=np.array([1.0]))
    x = np.array([[-0.2], [0.0], [3.1]])
    np.testing.assert_array_equal(model.predict(x), [0, 0, 1])
    np.testing.assert_allclose(model.predict_proba(x), 1 / (1 + np.exp(-x[:, 0])))


def test_hardmax():
    np.testing.assert_array_equal(core.hardmax_label([-0.2, 0.0, 3.1]), [0, 0, 1])
    np.testing.assert_array_equal(core.hardmax_label(np.zeros(4)), np.zeros(4))
    Y = np.array([0, 1, 1, 0])
    np.testing.assert_array_equal(core.hardmax_label(np.eye(4) @ (2 * Y - 1)), Y)


# permutations
def test_no_permutations():
    perms = core.sample_permutations(5, 0, seed=0)
    assert perms.T == 0
    Y = np.arange(5.0)
    assert core.stack_targets(Y, perms).shape == (5, 1)


def test_permutations_are_bijections_and_frozen():
    perms = core.sample_permutations(20, 6, seed=3)
    for p in perms.perms:
        np.testing.assert_array_equal(np.sort(p), np.arange(20))
    with pytest.raises(ValueError):
        perms.perms[0, 0] = 1


def test_inverse_permutation_round_trip():
    perms = core.sample_permutations(9, 3, seed=4)
    Y = np.random.default_rng(0).standard_normal(9)
    for p in perms.perms:
        np.testing.assert_array_equal(Y[p][core.invert_permutation(p)], Y)


def test_permutations_deterministic():
    a = core.sample_permutations(30, 4, seed=9).perms
    b = core.sample_permutations(30, 4, seed=9).perms
    np.testing.assert_array_equal(a, b)


def test_apply_permutation_columns():
    perms = core.PermutationSet(np.array([[2, 0, 1]]))
    np.testing.assert_array_equal(perms.apply(np.array([10.0, 20.0, 30.0]))[:, 0], [30.0, 10.0, 20.0])


# losses
def _instance(seed=0, n=16, J=8, T=4):
    rng = np.random.default_rng(seed)
    A = np.maximum(rng.standard_normal((n, J)), 0) + 0.1 * rng.standard_normal((n, J))
    Y = rng.standard_normal(n)
    perms = core.sample_permutations(n, T, seed=seed + 1)
    noise = rng.standard_normal((n, T + 1))
    return A, Y, perms, noise


def test_mlr_loss_matches_straight_line():
    A, Y, perms, noise = _instance()
    got = float(core.mlr_loss(A, 1.0, Y, perms, noise).value)
    want = mlr_loss_straight(svd_hat(A, 1.0), Y, list(perms.perms), noise[:, 0], noise[:, 1:].T)
    assert got == pytest.approx(want, abs=1e-12)


def test_mlr_loss_kernel_form_matches():
    A, Y, perms, noise = _instance(seed=1, n=6, J=12)
    got = float(core.mlr_loss(A, 0.5, Y, perms, noise, form="kernel").value)
    want = mlr_loss_straight(svd_hat(A, 0.5), Y, list(perms.perms), noise[:, 0], noise[:, 1:].T)
    assert got == pytest.approx(want, abs=1e-12)


def test_mlr_loss_identity_hat_limit():
    _, Y, perms, noise = _instance()
    loss = float(core.mlr_loss(None, None, Y, perms, noise, hat=lambda V: V).value)
    assert loss == pytest.approx(core.rmse_baseline(Y), abs=1e-12)


def test_mlr_loss_zero_hat_centered():
    _, Y, perms, _ = _instance()
    Y = Y - Y.mean()
    loss = float(core.mlr_loss(None, None, Y, perms, None, hat=lambda V: V * 0.0).value)
    assert loss == pytest.approx(math.sqrt(np.mean(Y ** 2)), abs=1e-14)


def test_mlr_loss_plain_rmse_without_permutations_or_noise():
    A, Y, _, _ = _instance()
    loss = float(core.mlr_loss(A, 2.0, Y, None, None).value)
    HY = linalg.ridge_apply(A, 2.0, Y[:, None])[:, 0]
    assert loss == math.sqrt(np.mean((Y - HY) ** 2))


def test_mlr_loss_reseeding_is_bit_identical():
    A, Y, perms, noise = _instance(seed=3)
    A2, Y2, perms2, noise2 = _instance(seed=3)
    a = core.mlr_loss(A, 1.0, Y, perms, noise).value
    b = core.mlr_loss(A2, 1.0, Y2, perms2, noise2).value
    assert a == b


def test_mlr_loss_invariant_to_permutation_order():
    A, Y, perms, noise = _instance()
    order = [0, 3, 1, 4, 2]  # column 0 (true labels) stays first
    shuffled = core.PermutationSet(perms.perms[[o - 1 for o in order[1:]]])
    a = float(core.mlr_loss(A, 1.0, Y, perms, noise).value)
    b = float(core.mlr_loss(A, 1.0, Y, shuffled, noise[:, order]).value)
    assert a == pytest.approx(b, abs=1e-14)


def test_structured_noise_vanishes_at_interpolation():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 12))
    xi = rng.standard_normal(6)
    resid = xi - linalg.ridge_apply(A, 1e-10, xi[:, None])[:, 0]
    assert np.linalg.norm(resid) < 1e-8


def test_structured_noise_bound():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((10, 4))
    xi = rng.standard_normal(10)
    H = svd_hat(A, 0.8)
    s = np.linalg.eigvalsh(H)
    lhs = np.linalg.norm(H @ (xi - H @ xi))
    assert lhs <= np.linalg.norm(xi) * np.max(s * (1 - s)) + 1e-12


def test_bce_identity_hat_first_term():
    Y = np.array([0, 1, 1, 0, 1, 0], dtype=float)
    noise = np.random.default_rng(0).standard_normal((6, 1))
    loss = float(core.bce_mlr_loss(None, None, Y, None, noise, hat=lambda V: V).value)
    assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-15)
    assert loss == pytest.approx(0.1269, abs=1e-4)


def test_bce_two_samples_zero_hat():
    loss = float(core.bce_mlr_loss(None, None, np.array([0.0, 1.0]), None, None,
                                   hat=lambda V: V * 0.0).value)
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_bce_matches_straight_line():
    A, _, perms, noise = _instance(seed=4)
    Y = (np.random.default_rng(4).random(16) > 0.5).astype(float)
    got = float(core.bce_mlr_loss(A, 1.0, Y, perms, noise).value)
    want = bce_mlr_loss_straight(svd_hat(A, 1.0), Y, list(perms.perms), noise[:, 0], noise[:, 1:].T)
    assert got == pytest.approx(want, abs=1e-12)


def test_bce_single_class():
    with pytest.raises(DegenerateClass):
        core.bce_mlr_loss(np.eye(3), 1.0, np.ones(3))


def test_dense_mse_loss():
    tape = ad.Tape()
    A = tape.const(np.eye(2))
    out = tape.param(np.array([[1.0], [2.0]]), "out")
    loss = core.dense_mse_loss(A, out, np.array([[1.0, 9.0], [0.0, 9.0]]))
    assert float(loss.value) == pytest.approx(2.0)


# label dither
def test_label_dither_zero_is_identity():
    Y = np.arange(5.0)
    perms = core.sample_permutations(5, 2, seed=0)
    np.testing.assert_array_equal(core.label_dither(Y, perms, 0.0, np.random.default_rng(0)),
                                  core.stack_targets(Y, perms))


def test_label_dither_scale():
    Y = np.zeros(10_000)
    out = core.label_dither(Y, None, 0.03, np.random.default_rng(0))
    assert 0.027 <= np.std(out[:, 0] - Y) <= 0.033


def test_structured_noise_none_at_zero_sigma():
    assert core.structured_noise(5, 3, 0.0, np.random.default_rng(0)) is None
    assert core.structured_noise(5, 3, 2.0, np.random.default_rng(0)).shape == (5, 4)


# lambda initialisation
def test_lambda_grid_endpoints():
    grid = core.lambda_grid()
    assert len(grid) == 12
    assert grid[0] == 0.1 and grid[-1] == 1e4
    np.testing.assert_allclose(grid, lambda_grid_loop(), rtol=1e-15)


def test_init_lambda_argmax_semantics():
    grid = core.lambda_grid()
    losses = np.cumsum([0, 1, 3, 2, 0, 0, 0, 0, 0, 0, 0, 0])
    k = int(np.argmax(np.diff(losses)))
    assert k == 1
    assert math.sqrt(grid[1] * grid[2]) == pytest.approx(0.1 * 10 ** (7.5 / 11))


def test_init_lambda_matches_brute_force_scan():
    rng = np.random.default_rng(7)
    n, d, J = 64, 8, 32
    x = rng.standard_normal((n, d))
    Y = rng.standard_normal(n)
    params = core.init_weights(d, J, 2, seed=3)
    perms = core.sample_permutations(n, 4, seed=5)
    noise = rng.standard_normal((n, 5))
    cfg = core.MlrConfig(width=J, n_permutations=4)
    got = core.init_lambda(params, x, Y, perms, noise, cfg)
    A = forward_loop(params.weights, params.biases, x)
    grid = list(core.lambda_grid())
    want, k = brute_force_lambda(
        lambda lam: mlr_loss_straight(svd_hat(A, lam), Y, list(perms.perms), noise[:, 0], noise[:, 1:].T),
        grid)
    assert got.k_hat == k
    assert got.value == want


def test_init_lambda_within_grid():
    rng = np.random.default_rng(8)
    params = core.init_weights(3, 16, 2, seed=0)
    out = core.init_lambda(params, rng.standard_normal((20, 3)), rng.standard_normal(20),
                           core.sample_permutations(20, 2, seed=0), None, core.MlrConfig())
    assert core.lambda_grid()[0] <= out.value <= core.lambda_grid()[-1]
    assert len(out.losses) == 12


def test_model_params_round_trip():
    p = core.init_weights(3, 4, 3, seed=0)
    p.log_lambda = 1.5
    q = core.ModelParams.from_dict(p.as_dict())
    assert q.lam == pytest.approx(math.exp(1.5))
    for k, v in p.as_dict().items():
        np.testing.assert_array_equal(v, q.as_dict()[k])
