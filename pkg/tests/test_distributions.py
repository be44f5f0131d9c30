import math

import numpy as np
import pytest
from scipy import stats

from scripts.distributions import (
    ParametricDist,
    FitReport,
    apply_quantile_map,
    build_quantile_map,
    burr_cdf,
    burr_quantile,
    fit_mle,
    weibull_cdf,
    weibull_pdf,
    weibull_quantile,
)
from scripts.errors import FitError
from scripts.metrics import integrate_segments, ks_one_sample

pytestmark = pytest.mark.unit


# ─── CLOSED FORMS ─────────────────────────────────────────────────────────────


def test_burr_unit_parameters():
    dist = ParametricDist.burr(1.0, 1.0, 1.0)
    assert burr_cdf(dist, 0.0) == 0.0
    assert burr_cdf(dist, 1.0) == pytest.approx(0.5)
    assert burr_quantile(dist, 0.5) == pytest.approx(1.0)


def test_burr_cdf_closed_form():
    dist = ParametricDist.burr(2.0, 3.0, 5.0)
    y = np.array([0.5, 5.0, 40.0])
    np.testing.assert_allclose(burr_cdf(dist, y), 1 - (1 + (y / 5.0) ** 2) ** -3.0)


def test_weibull_closed_forms():
    dist = ParametricDist.weibull(1.0, 2.0)
    assert weibull_quantile(dist, 0.5) == pytest.approx(2 * math.log(2))
    assert weibull_cdf(dist, 2.0) == pytest.approx(1 - math.exp(-1))
    assert weibull_pdf(dist, 0.0) == pytest.approx(0.5)


@pytest.mark.parametrize(
    "dist", [ParametricDist.burr(1.2, 0.5, 1000.0), ParametricDist.weibull(0.5, 1000.0)], ids=["burr", "weibull"]
)
def test_quantile_inverts_cdf_over_six_decades(dist):
    y = np.geomspace(0.1, 1e5, 61)
    np.testing.assert_allclose(dist.quantile(dist.cdf(y)), y, rtol=1e-9)


@pytest.mark.parametrize(
    "dist", [ParametricDist.burr(2.0, 3.0, 1000.0), ParametricDist.weibull(1.5, 1000.0)], ids=["burr", "weibull"]
)
def test_density_integrates_to_one(dist):
    upper = float(dist.quantile(1 - 1e-8))
    points = dist.quantile(np.array([0.1, 0.5, 0.9, 0.99]))
    total = integrate_segments(lambda y: float(dist.pdf(y)), 0.0, upper, points)
    assert 1 - 1e-4 <= total <= 1.0


def test_family_functions_check_the_tag():
    with pytest.raises(ValueError):
        burr_cdf(ParametricDist.weibull(1.0, 1.0), 1.0)


@pytest.mark.parametrize("args", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, float("inf"))])
def test_invalid_burr_parameters(args):
    with pytest.raises(ValueError):
        ParametricDist.burr(*args)


def test_dist_dict_round_trip():
    dist = ParametricDist.burr(2.5, 0.75, 1234.5)
    assert ParametricDist.from_dict(dist.to_dict()) == dist


# ─── FITTING ──────────────────────────────────────────────────────────────────


def _grid_search_burr(y, passes=4, points=41):
    """Burr maximum likelihood by nested grids over log(c) and log(scale); k is profiled in closed form."""
    n, log_y = y.size, np.log(y)
    centre = np.zeros(2)
    half_width = np.array([np.log(8.0), np.log(10.0)])
    for _ in range(passes):
        best_ll, best = -np.inf, None
        for log_c in np.linspace(centre[0] - half_width[0], centre[0] + half_width[0], points):
            c = math.exp(log_c)
            for log_scale in np.linspace(centre[1] - half_width[1], centre[1] + half_width[1], points):
                total = np.logaddexp(0.0, c * (log_y - log_scale)).sum()
                k = n / total
                ll = n * (log_c + math.log(k) - log_scale) + (c - 1) * (log_y.sum() - n * log_scale) - (k + 1) * total
                if ll > best_ll:
                    best_ll, best = ll, (log_c, log_scale, k)
        centre = np.array(best[:2])
        half_width = half_width * 4.0 / (points - 1)
    return math.exp(best[0]), best[2], math.exp(best[1])


@pytest.mark.slow
def test_burr_fit_matches_grid_search_likelihood():
    rng = np.random.default_rng(11)
    samples = stats.burr12.rvs(2.0, 3.0, scale=1.0, size=10_000, random_state=rng)
    report = fit_mle(samples)
    assert not report.fallback
    fitted = report.dist
    c, k, scale = _grid_search_burr(samples)
    assert fitted.c == pytest.approx(c, rel=0.05)
    assert fitted.k == pytest.approx(k, rel=0.05)
    assert fitted.scale == pytest.approx(scale, rel=0.05)
    u = np.array([0.1, 0.5, 0.9, 0.99])
    truth = ParametricDist.burr(2.0, 3.0, 1.0)
    np.testing.assert_allclose(fitted.quantile(u), truth.quantile(u), rtol=0.05)


@pytest.mark.slow
def test_weibull_shaped_data_fits_closely():
    rng = np.random.default_rng(12)
    samples = stats.weibull_min.rvs(1.5, scale=2.0, size=10_000, random_state=rng)
    report = fit_mle(samples)
    grid = np.linspace(0.01, 10.0, 500)
    truth = stats.weibull_min.cdf(grid, 1.5, scale=2.0)
    assert np.max(np.abs(report.dist.cdf(grid) - truth)) < 0.02


def test_fit_improves_on_the_start_point(rng):
    samples = stats.burr12.rvs(3.0, 1.5, scale=500.0, size=500, random_state=rng)
    report = fit_mle(samples)
    assert report.loglik >= report.start_loglik
    assert np.all(np.isfinite(report.dist.cdf(samples)))


def test_failed_burr_fit_falls_back_to_weibull(rng):
    samples = stats.burr12.rvs(2.0, 3.0, scale=10.0, size=200, random_state=rng)
    report = fit_mle(samples, max_iter=1)
    assert report.fallback
    assert report.dist.tag == "Weibull"
    assert not report.converged


def test_zeros_are_shifted_not_rejected(rng):
    samples = np.concatenate([np.zeros(5), stats.weibull_min.rvs(2.0, scale=100.0, size=60, random_state=rng)])
    report = fit_mle(samples)
    assert np.isfinite(report.loglik)


def test_too_few_samples():
    with pytest.raises(FitError):
        fit_mle(np.ones(29))


def test_non_finite_samples():
    samples = np.ones(40)
    samples[3] = np.nan
    with pytest.raises(FitError):
        fit_mle(samples)


def test_fit_report_text_line():
    report = FitReport(ParametricDist.burr(2.0, 3.0, 1500.25), False, -1234.5678, 87, True)
    again = FitReport.from_line(report.to_line())
    assert again.dist == report.dist
    assert again.fallback is False
    assert again.loglik == report.loglik


def test_fit_report_dict():
    report = FitReport(ParametricDist.weibull(1.2, 30.0), True, -10.0, 5, False, -12.0)
    assert FitReport.from_dict(report.to_dict()) == report


def test_fallback_flag_must_match_family():
    with pytest.raises(ValueError):
        FitReport(ParametricDist.weibull(1.0, 1.0), False, 0.0, 0, True)


# ─── QUANTILE MAPPING ─────────────────────────────────────────────────────────


def test_identical_distributions_map_identically():
    dist = ParametricDist.burr(1.2, 0.8, 1000.0)
    y = np.geomspace(0.1, 1e5, 100)
    np.testing.assert_allclose(apply_quantile_map(build_quantile_map(dist, dist), y), y, rtol=1e-9)
    assert apply_quantile_map(build_quantile_map(dist, dist), [0.0])[0] == 0.0


@pytest.mark.slow
def test_mapped_predictions_follow_the_reference():
    rng = np.random.default_rng(31)
    pred = ParametricDist.weibull(1.5, 800.0)
    ref = ParametricDist.burr(2.0, 3.0, 1000.0)
    mapped = apply_quantile_map(build_quantile_map(pred, ref), pred.sample(10_000, rng))
    d, _ = ks_one_sample(mapped, ref)
    assert d <= 0.02


def test_doubling_the_scale_doubles_values():
    source = ParametricDist.weibull(1.7, 100.0)
    target = ParametricDist.weibull(1.7, 200.0)
    y = np.array([1.0, 50.0, 100.0, 400.0])
    np.testing.assert_allclose(apply_quantile_map(build_quantile_map(source, target), y), 2 * y, rtol=1e-7)


def test_map_is_monotone_and_fixes_zero():
    qmap = build_quantile_map(ParametricDist.burr(1.5, 2.0, 300.0), ParametricDist.weibull(0.9, 800.0))
    y = np.linspace(0.0, 5e4, 400)
    mapped = apply_quantile_map(qmap, y)
    assert mapped[0] == 0.0
    assert np.all(np.diff(mapped) >= 0)


def test_map_rejects_negative_values():
    dist = ParametricDist.weibull(1.0, 1.0)
    with pytest.raises(ValueError):
        apply_quantile_map(build_quantile_map(dist, dist), [-1.0])
