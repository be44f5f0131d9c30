import numpy as np
import pytest

from scripts.claims import MISSING_TOKEN
from scripts.errors import ImputationError
from scripts.imputation import (
    GaussianParams,
    TableImputer,
    date_fill_value,
    em_fit,
    em_impute,
    impute_categorical,
    impute_dates,
)

pytestmark = pytest.mark.unit


def _mcar(x, rate, rng):
    mask = rng.random(x.shape) < rate
    # every row keeps at least one observed entry
    mask[mask.all(axis=1), 0] = False
    return mask


# ─── EM ───────────────────────────────────────────────────────────────────────


def test_complete_data_gives_sample_moments_in_one_iteration(rng):
    x = rng.normal(size=(50, 3))
    params = em_fit(x, np.zeros_like(x, dtype=bool))
    assert params.iterations == 1
    np.testing.assert_allclose(params.mean, x.mean(axis=0))
    np.testing.assert_allclose(params.cov, np.cov(x, rowvar=False, bias=True), atol=1e-12)


def test_univariate_gaps_take_the_observed_mean():
    x = np.array([[1.0], [0.0], [3.0], [0.0]])
    mask = np.array([[False], [True], [False], [True]])
    params = em_fit(x, mask)
    filled = em_impute(x, mask, params)
    assert filled[1, 0] == pytest.approx(2.0)
    assert filled[3, 0] == pytest.approx(2.0)


def test_exact_line_conditional_mean():
    x1 = np.array([1.0, 2.0, 4.0, 5.0, 3.0])
    x = np.column_stack([x1, 2 * x1])
    mask = np.zeros_like(x, dtype=bool)
    mask[4, 1] = True
    params = em_fit(x, mask, max_iter=500, tol=1e-12)
    filled = em_impute(x, mask, params)
    assert filled[4, 1] == pytest.approx(6.0, rel=1e-3)


def test_fully_missing_column_is_named():
    x = np.ones((4, 2))
    mask = np.zeros_like(x, dtype=bool)
    mask[:, 1] = True
    with pytest.raises(ImputationError, match="b"):
        em_fit(x, mask, names=["a", "b"])


def test_impute_is_identity_without_gaps(rng):
    x = rng.normal(size=(10, 2))
    mask = np.zeros_like(x, dtype=bool)
    params = em_fit(x, mask)
    np.testing.assert_array_equal(em_impute(x, mask, params), x)


def test_fully_missing_row_gets_the_mean(rng):
    x = rng.normal(size=(30, 2))
    mask = np.zeros_like(x, dtype=bool)
    params = em_fit(x, mask)
    mask[0] = True
    filled = em_impute(x, mask, params)
    np.testing.assert_allclose(filled[0], params.mean)


def test_observed_entries_never_change(rng):
    x = rng.multivariate_normal([0, 1, 2], [[1, 0.5, 0.2], [0.5, 1, 0.3], [0.2, 0.3, 1]], size=200)
    mask = _mcar(x, 0.2, rng)
    filled = em_impute(x, mask, em_fit(x, mask))
    np.testing.assert_array_equal(filled[~mask], x[~mask])


def test_loglik_is_monotone_over_random_instances():
    for instance in range(100):
        rng = np.random.default_rng(instance)
        m = int(rng.integers(2, 5))
        a = rng.normal(size=(m, m))
        x = rng.multivariate_normal(rng.normal(size=m), a @ a.T + 0.1 * np.eye(m), size=60)
        mask = _mcar(x, 0.25, rng)
        trace = np.array(em_fit(x, mask, max_iter=30, tol=1e-10).loglik_trace)
        assert np.all(np.diff(trace) >= -1e-6 * np.abs(trace).max()), instance


@pytest.mark.slow
def test_parameter_recovery_under_mcar():
    rng = np.random.default_rng(7)
    mean = np.array([1.0, -2.0, 0.5])
    cov = np.array([[2.0, 0.6, 0.3], [0.6, 1.0, -0.2], [0.3, -0.2, 1.5]])
    n = 10_000
    x = rng.multivariate_normal(mean, cov, size=n)
    mask = _mcar(x, 0.2, rng)
    params = em_fit(x, mask)
    # standard errors with only the observed share of rows (pairs for covariances)
    variance = np.diag(cov)
    mean_error = np.sqrt(variance / (0.8 * n))
    cov_error = np.sqrt((np.outer(variance, variance) + cov ** 2) / (0.64 * n))
    assert np.all(np.abs(params.mean - mean) < 3 * mean_error)
    assert np.all(np.abs(params.cov - cov) < 3 * cov_error)


def test_gaussian_params_audit_dump(tmp_path, rng):
    x = rng.normal(size=(20, 2))
    params = em_fit(x, np.zeros_like(x, dtype=bool), names=["a", "b"])
    params.write(tmp_path / "mean.csv", tmp_path / "cov.csv")
    again = GaussianParams.read(tmp_path / "mean.csv", tmp_path / "cov.csv")
    np.testing.assert_array_equal(again.mean, params.mean)
    np.testing.assert_array_equal(again.cov, params.cov)
    assert again.names == ("a", "b")


# ─── CATEGORICAL AND DATES ────────────────────────────────────────────────────


def test_categorical_gap_gets_reserved_level():
    out = impute_categorical(np.array(["A", "", "B"], dtype=object), np.array([False, True, False]))
    assert out.tolist() == ["A", MISSING_TOKEN, "B"]


def test_categorical_all_missing():
    out = impute_categorical(np.array(["", ""], dtype=object), np.array([True, True]))
    assert out.tolist() == [MISSING_TOKEN, MISSING_TOKEN]


def test_reserved_level_collision():
    with pytest.raises(ImputationError):
        impute_categorical(np.array([MISSING_TOKEN], dtype=object), np.array([False]))


def _dates(*days):
    return np.array(days, dtype="datetime64[D]")


def test_date_median_of_year_and_day():
    # 1990 day 1, 2000 day 100, 2010 day 200
    values = _dates("1990-01-01", "2000-04-09", "2010-07-19", "NaT")
    mask = np.array([False, False, False, True])
    filled = impute_dates(values, mask)
    assert str(filled[3]) == "2000-04-09"


def test_single_observed_date_fills_everything():
    filled = impute_dates(_dates("2001-05-05", "NaT", "NaT"), np.array([False, True, True]))
    assert [str(d) for d in filled] == ["2001-05-05"] * 3


def test_day_366_clamps_in_non_leap_year():
    # median year 2001 (not leap), median day of year 366
    values = _dates("2000-12-31", "2001-01-01", "2001-03-01", "2004-12-31", "2004-12-31")
    fill = date_fill_value(values, np.zeros(5, dtype=bool))
    assert str(fill) == "2001-12-31"


def test_dates_without_observations_fail():
    with pytest.raises(ImputationError):
        impute_dates(_dates("NaT"), np.array([True]))


# ─── TABLE IMPUTER ────────────────────────────────────────────────────────────


def test_table_imputer_leaves_no_gaps(small_county):
    table = small_county.table
    imputer = TableImputer().fit(table.take(range(400)))
    filled = imputer.transform(table.take(range(400, table.n)))
    response = table.schema.response
    for name in filled.field_names:
        if name == response:
            continue
        if filled.kind(name) in ("continuous", "categorical") or name in imputer.date_fill:
            assert not filled.mask[name].any(), name


def test_table_imputer_rejects_empty_table(small_county):
    with pytest.raises(ImputationError):
        TableImputer().fit(small_county.table.take([]))
