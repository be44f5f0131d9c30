import numpy as np
import pytest

from scripts.backtest import (
    BacktestReport,
    ExperimentConfig,
    WindowSpec,
    evaluate_split,
    group_loo,
    load_experiment,
    plot_data,
    protocol_correlation,
    read_report,
    read_reports,
    repeated_split_eval,
    run_backtest,
    run_window,
    summary_frame,
    weighted_aggregate,
    window_plan,
    window_rows,
    with_manifest,
    write_plot_data,
    write_report,
    write_summary,
)
from scripts.backtest import protocol
from scripts.claims import loss_years
from scripts.distributions import FitReport, ParametricDist
from scripts.errors import ConfigError, ManifestError, ProtocolError
from scripts.manifest import RunManifest, read_manifest, write_manifest
from scripts.metrics import MetricBundle

pytestmark = pytest.mark.unit


# ─── WINDOW PLANS ─────────────────────────────────────────────────────────────


def test_shifting_plan():
    plan = window_plan(2000, 10, "shifting", 2020)
    assert len(plan) == 11
    assert plan[0].train_range == (2000, 2009) and plan[0].test_year == 2010
    assert plan[1].train_range == (2001, 2010) and plan[1].test_year == 2011
    assert plan[-1].train_range == (2010, 2019) and plan[-1].test_year == 2020


def test_expanding_plan():
    plan = window_plan(2000, 10, "expanding", 2020)
    assert len(plan) == 11
    assert plan[1].train_range == (2000, 2010)
    assert plan[-1].train_range == (2000, 2019) and plan[-1].test_year == 2020


def test_empty_plan_is_an_error():
    with pytest.raises(ProtocolError):
        window_plan(2000, 10, "shifting", 2009)


def test_training_years_never_reach_the_test_year():
    for mode in ("shifting", "expanding"):
        for spec in window_plan(1990, 5, mode, 2010):
            assert max(spec.train_years) < spec.test_year


def test_window_rows_follow_loss_years(small_county):
    table = small_county.table
    spec = WindowSpec(2000, 10, "shifting", 1)
    train, test = window_rows(table, spec)
    years = loss_years(table)
    assert set(years[train].tolist()) <= set(range(2001, 2011))
    assert set(years[test].tolist()) == {2011}


# ─── EXPERIMENT CONFIG ────────────────────────────────────────────────────────


def test_unknown_mode_is_a_config_error():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"mode": "sliding", "synthetic": True})


def test_unknown_key_is_a_config_error():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"windowSize": 3, "synthetic": True})


def test_claims_path_required_without_synthetic():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({})


def test_experiment_file_with_overrides(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text("offset: 5\nmode: expanding\ncounties: 48201, 22071\nsynthetic: true\n", encoding="utf-8")
    experiment = load_experiment(path, {"seed": 17, "claims": None})
    assert experiment.offset == 5
    assert experiment.mode == "expanding"
    assert experiment.counties == ("48201", "22071")
    assert experiment.seed == 17


def test_malformed_experiment_file(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment(path)


# ─── AGGREGATION ──────────────────────────────────────────────────────────────


def _bundle(r2, n, ks_p=0.5):
    return MetricBundle(rmse=1.0, rmse_over_sigma=0.5, ks_stat=0.1, ks_p=ks_p, kl=0.1, dist_r2=r2, auc=0.6, n_test=n)


def _report(year, r2, n, county="48201"):
    return BacktestReport(
        county=county,
        label=str(year),
        window=WindowSpec(year - 10, 10, "shifting", 0),
        before=_bundle(r2, n),
        n_train=100,
        n_test=n,
    )


def test_claim_weighted_mean():
    reports = [_report(2010, 0.9, 30), _report(2011, 0.8, 10)]
    assert weighted_aggregate(reports, "dist_r2", "before") == pytest.approx(0.875)


def test_single_report_aggregate_is_its_value():
    assert weighted_aggregate([_report(2010, 0.42, 7)], "dist_r2", "before") == pytest.approx(0.42)


def test_aggregate_needs_reports():
    with pytest.raises(ValueError):
        weighted_aggregate([], "dist_r2")


def test_aggregate_skips_reports_without_the_metric():
    reports = [_report(2010, 0.9, 30), _report(2011, None, 10)]
    assert weighted_aggregate(reports, "dist_r2", "before") == pytest.approx(0.9)


def test_protocol_correlation():
    a = [_report(year, r2, 20) for year, r2 in ((2010, 0.1), (2011, 0.5), (2012, 0.3))]
    b = [_report(year, 2 * r2 + 1, 50) for year, r2 in ((2010, 0.1), (2011, 0.5), (2012, 0.3))]
    assert protocol_correlation(a, b, "dist_r2", "before") == pytest.approx(1.0)
    with pytest.raises(ProtocolError):
        protocol_correlation(a[:1], b[:1], "dist_r2", "before")


def test_after_bundle_requires_training_fits():
    with pytest.raises(ValueError):
        BacktestReport(county="x", label="y", after=_bundle(0.5, 3), n_test=3)


# ─── OUTPUT FILES ─────────────────────────────────────────────────────────────


def test_summary_and_plot_data(tmp_path):
    reports = [_report(2011, 0.8, 10), _report(2010, 0.9, 30), _report(2010, 0.7, 5, county="22071")]
    frame = summary_frame(reports)
    assert list(frame["county"]) == ["48201", "48201", "22071"]
    assert list(frame["stage"]) == ["before"] * 3

    plots = plot_data(reports)
    assert sorted(plots) == ["22071", "48201"]
    assert plots["48201"]["year"].tolist() == [2010, 2011]
    assert plots["48201"]["alpha"].tolist() == ["0.05", "0.05"]

    paths = write_plot_data(reports, tmp_path, "json")
    assert sorted(p.name for p in paths) == ["plot_22071.json", "plot_48201.json"]
    summary = write_summary(reports, tmp_path / "summary.csv")
    assert len(summary.read_text(encoding="utf-8").strip().splitlines()) == 4


def test_report_files_are_read_back_in_name_order(tmp_path):
    reports = [_report(2012, 0.3, 4), _report(2010, 0.1, 4)]
    for report in reports:
        write_report(report, tmp_path)
    (tmp_path / "manifest.json").write_text("{}", encoding="utf-8")
    again = read_reports(tmp_path)
    assert [r.label for r in again] == ["2010", "2012"]
    assert again[1] == reports[0]


def test_report_with_fits_round_trips(tmp_path):
    fit = FitReport(ParametricDist.burr(2.0, 3.0, 1e4), False, -500.0, 40, True, -600.0)
    report = BacktestReport(
        county="48201",
        label="2015",
        window=WindowSpec(2005, 10, "expanding", 0),
        before=_bundle(0.2, 12),
        after=_bundle(0.6, 12),
        pred_fit=fit,
        ref_fit=fit,
        n_train=80,
        n_test=12,
        regressor="gbt",
        hyperparameters={"kind": "gbt", "trees": 3},
        importance=(("x0", 1.0), ("x1", 0.25)),
        flags=("test_ref_fit_failed",),
    )
    assert read_report(write_report(report, tmp_path)) == report


def test_manifest_detects_changed_inputs(tmp_path):
    claims = tmp_path / "claims.csv"
    claims.write_text("a,b\n1,2\n", encoding="utf-8")
    manifest = RunManifest.start({"offset": 10}, 3, [claims])
    manifest.mark("reports", "ok")
    manifest.finish()
    write_manifest(manifest, tmp_path)
    assert read_manifest(tmp_path).manifest_id == manifest.manifest_id

    claims.write_text("a,b\n1,3\n", encoding="utf-8")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path)
    assert read_manifest(tmp_path, verify=False).verify() == [str(claims)]


def test_manifest_id_ignores_timestamps():
    first = RunManifest.start({"offset": 10}, 3)
    second = RunManifest.start({"offset": 10}, 3)
    second.finish()
    assert first.manifest_id == second.manifest_id
    assert RunManifest.start({"offset": 11}, 3).manifest_id != first.manifest_id


def test_with_manifest_stamps_every_report():
    stamped = with_manifest([_report(2010, 0.5, 3), _report(2011, 0.5, 3)], "abc")
    assert {r.manifest_id for r in stamped} == {"abc"}


# ─── EVALUATION ───────────────────────────────────────────────────────────────


@pytest.fixture(scope="module")
def experiment():
    return ExperimentConfig.from_mapping(
        {"synthetic": True, "regressor": "gp", "baseline": 2000, "offset": 10, "last_test_year": 2013, "seed": 4}
    )


@pytest.fixture(scope="module")
def window_report(small_county, experiment):
    return run_window(small_county.table, WindowSpec(2000, 10, "shifting", 0), experiment, county="99001")


def test_window_report_contents(window_report):
    report = window_report
    assert report.label == "2010"
    assert report.n_train > 0 and report.n_test > 0
    assert report.before is not None
    assert report.before.n_test == report.n_test
    assert report.regressor == "gp"
    if report.after is not None:
        assert report.pred_fit is not None and report.ref_fit is not None


def test_window_evaluation_is_deterministic(small_county, experiment, window_report):
    again = run_window(small_county.table, WindowSpec(2000, 10, "shifting", 0), experiment, county="99001")
    assert again.to_dict() == window_report.to_dict()


def test_window_report_file_round_trip(tmp_path, window_report):
    again = read_report(write_report(window_report, tmp_path))
    assert again.to_dict() == window_report.to_dict()


def test_test_year_cannot_leak_into_training(small_county, experiment, window_report):
    table = small_county.table
    spec = WindowSpec(2000, 10, "shifting", 0)
    _, test = window_rows(table, spec)
    response = table.schema.response
    values = table.columns[response].copy()
    values[test] = values[test] * 10.0
    shifted = table.with_column(response, "continuous", values, table.mask[response])

    report = run_window(shifted, spec, experiment, county="99001")
    assert report.hyperparameters == window_report.hyperparameters
    assert report.ref_fit == window_report.ref_fit
    assert report.pred_fit == window_report.pred_fit
    assert report.n_test == window_report.n_test


def test_empty_test_year_is_flagged(small_county, experiment):
    report = run_window(small_county.table, WindowSpec(2004, 10, "expanding", 0), experiment, county="99001")
    assert report.empty
    assert "empty_test" in report.flags
    assert report.before is None


def test_overlapping_rows_are_rejected(small_county, experiment):
    with pytest.raises(ProtocolError):
        evaluate_split(small_county.table, [0, 1, 2], [2, 3], experiment, seed=0)


def test_repeated_split_single_repeat(small_county, experiment):
    table = small_county.table.take(range(200))
    summary = repeated_split_eval(table, 1, 5, experiment)
    assert len(summary.reports) == 1
    report = summary.reports[0]
    assert report.label == "repeat0"
    assert report.n_train + report.n_test == 200
    assert set(summary.stats) == {"before", "after"}
    assert summary.stats["before"]["rmse"]["count"] == 1


def test_leave_one_event_out_with_two_events(small_county, experiment):
    table = small_county.table.take(range(300))
    labels = np.where(loss_years(table) < 2007, "early", "late").astype(object)
    reports = group_loo(table, experiment, labels=labels, county="99001")
    assert [r.label for r in reports] == ["event-early", "event-late"]
    assert sum(r.n_test for r in reports) == 300


def test_leave_one_out_needs_two_labels(small_county, experiment):
    table = small_county.table.take(range(10))
    with pytest.raises(ProtocolError):
        group_loo(table, experiment, labels=np.array(["a"] * 10, dtype=object))
    with pytest.raises(ProtocolError):
        group_loo(table, experiment, labels=np.array(["a"] * 9 + [""], dtype=object))


@pytest.mark.slow
def test_boosted_trees_window(small_county):
    experiment = ExperimentConfig.from_mapping(
        {"synthetic": True, "regressor": "gbt", "cycles": 2, "baseline": 2000, "offset": 10, "last_test_year": 2013}
    )
    report = run_window(small_county.table, WindowSpec(2000, 10, "expanding", 2), experiment, county="99001")
    assert report.regressor == "gbt"
    assert report.hyperparameters["kind"] == "gbt"
    assert report.importance and report.importance[0][1] == 1.0


def _raise_value_error(*args, **kwargs):
    raise ValueError("malformed stage input")


@pytest.mark.parametrize(
    "target, flag",
    [
        ("attach_rain", "rain_failed"),
        ("one_hot", "encoding_failed"),
        ("make_regressor", "regressor_failed"),
        ("evaluate", "metrics_failed"),
    ],
)
def test_stage_errors_become_flags(monkeypatch, rainy_county, experiment, target, flag):
    monkeypatch.setattr(protocol, target, _raise_value_error)
    table = rainy_county.table
    train, test = window_rows(table, WindowSpec(2000, 3, "shifting", 0))
    report = evaluate_split(table, train, test, experiment, seed=0, county="99001", label="2003", grid=rainy_county.grid)
    assert report.flags == (flag,)
    assert report.before is None and report.after is None
    assert report.n_train > 0 and report.n_test > 0


def test_failing_window_does_not_stop_the_backtest(monkeypatch, small_county, experiment):
    original = protocol.one_hot

    def fail_for_2011(table, levels):
        if table.n and (loss_years(table) == 2011).all():
            raise ValueError("malformed stage input")
        return original(table, levels)

    monkeypatch.setattr(protocol, "one_hot", fail_for_2011)
    plan_experiment = ExperimentConfig.from_mapping(
        {"synthetic": True, "regressor": "gp", "baseline": 2000, "offset": 10, "last_test_year": 2011, "seed": 4}
    )
    reports = run_backtest(small_county.table, plan_experiment, county="99001")
    assert [r.label for r in reports] == ["2010", "2011"]
    assert reports[0].before is not None
    assert reports[1].flags == ("encoding_failed",)
