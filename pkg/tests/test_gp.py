import numpy as np
import pytest

from scripts.errors import RegressorError
from scripts.models.gp import (
    BASES,
    GPConfig,
    basis_matrix,
    gp_fit,
    gp_fit_config,
    gp_predict,
    kernel_matrix,
    search_candidates,
)

pytestmark = pytest.mark.unit


def test_linear_target_selects_the_linear_basis(rng):
    x = rng.uniform(0, 10, size=(40, 1))
    y = 2 * x[:, 0] + 1
    model = gp_fit(x, y, folds=5, candidates=12, seed=1)
    assert model.cv_rmse < 1e-6
    assert model.config.basis == "linear"
    mean, _ = gp_predict(model, np.array([[2.5], [7.0]]))
    np.testing.assert_allclose(mean, [6.0, 15.0], atol=1e-6)


def test_too_few_rows_for_the_folds(rng):
    x = rng.normal(size=(4, 2))
    with pytest.raises(RegressorError):
        gp_fit(x, x[:, 0], folds=5, candidates=2)


def test_rows_equal_to_folds_is_enough(rng):
    x = rng.normal(size=(5, 2))
    model = gp_fit(x, x[:, 0] + x[:, 1] ** 2, folds=5, candidates=3)
    assert np.isfinite(model.cv_rmse)
    assert len(model.search_log) == 3


def test_single_fold_is_rejected(rng):
    x = rng.normal(size=(10, 1))
    with pytest.raises(RegressorError):
        gp_fit(x, x[:, 0], folds=1)


def test_small_noise_interpolates_training_points():
    x = np.arange(6, dtype=float).reshape(-1, 1)
    y = np.sin(x[:, 0])
    model = gp_fit_config(x, y, GPConfig("constant", length_scale=1.0, noise=1e-4, standardize=False))
    mean, var = gp_predict(model, x)
    np.testing.assert_allclose(mean, y, atol=1e-3)
    assert np.all(var < 1e-3)
    assert np.all(var >= model.noise_var)


def test_far_point_reverts_to_the_basis():
    x = np.arange(6, dtype=float).reshape(-1, 1)
    y = np.cos(x[:, 0]) + 3.0
    model = gp_fit_config(x, y, GPConfig("constant", length_scale=1.0, noise=0.1, standardize=False))
    mean, var = gp_predict(model, np.array([[1000.0]]))
    assert mean[0] == pytest.approx(model.coefficients[0])
    assert var[0] == pytest.approx(model.prior_var + model.noise_var)


@pytest.mark.parametrize("basis", BASES)
def test_posterior_matches_dense_solve(rng, basis):
    x = rng.uniform(-2, 2, size=(30, 2))
    y = x[:, 0] ** 2 - x[:, 1] + rng.normal(scale=0.1, size=30)
    model = gp_fit_config(x, y, GPConfig(basis, length_scale=0.8, noise=0.1, standardize=True))
    probe = rng.uniform(-2, 2, size=(7, 2))

    xs = (x - model.x_mean) / model.x_scale
    ps = (probe - model.x_mean) / model.x_scale
    a = kernel_matrix(xs, xs, 0.8) + (0.1**2 / model.prior_var) * np.eye(30)
    cross = kernel_matrix(ps, xs, 0.8)
    expected_mean = basis_matrix(ps, basis) @ model.coefficients + cross @ np.linalg.solve(a, model.residuals)
    expected_var = model.prior_var * (1 - np.sum(cross * np.linalg.solve(a, cross.T).T, axis=1)) + 0.1**2

    mean, var = gp_predict(model, probe)
    np.testing.assert_allclose(mean, expected_mean, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(var, expected_var, rtol=1e-8, atol=1e-10)


def test_prediction_column_mismatch(rng):
    x = rng.normal(size=(10, 2))
    model = gp_fit_config(x, x[:, 0], GPConfig("linear", 1.0, 0.1, False))
    with pytest.raises(RegressorError):
        gp_predict(model, x[:, :1])


def test_candidates_cycle_bases_and_standardization(rng):
    x = rng.normal(size=(20, 2))
    configs = search_candidates(x, x[:, 0], 12, seed=0)
    assert [c.basis for c in configs[:3]] == list(BASES)
    assert [c.standardize for c in configs[:6]] == [True] * 3 + [False] * 3
    assert configs == search_candidates(x, x[:, 0], 12, seed=0)


def test_model_report_lists_hyperparameters(rng):
    x = rng.normal(size=(10, 1))
    model = gp_fit_config(x, x[:, 0] ** 2, GPConfig("quadratic", 0.5, 0.2, True))
    text = model.to_text()
    assert text.startswith("gp-model v1\n")
    assert "basis quadratic" in text
    assert f"length_scale {0.5!r}" in text


def test_length_scales_follow_the_fitted_inputs(rng):
    x = rng.uniform(0, 1000, size=(50, 2))
    raw_spread = np.max(np.ptp(x, axis=0))
    scaled_spread = np.max(np.ptp((x - x.mean(axis=0)) / x.std(axis=0), axis=0))
    for config in search_candidates(x, x[:, 0], 24, seed=3):
        spread = scaled_spread if config.standardize else raw_spread
        assert spread * 1e-3 <= config.length_scale <= spread
