from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from utils import load_config, setup_logger
from scripts.backtest.experiment import ExperimentConfig
from scripts.backtest.reports import BacktestReport, metric_value
from scripts.backtest.windows import WindowSpec, window_plan
from scripts.claims.preprocessing import derive_date_features
from scripts.claims.table import ClaimTable, loss_years
from scripts.distributions import FitReport, apply_quantile_map, build_quantile_map, fit_mle
from scripts.errors import FloodLossError, ProtocolError
from scripts.features import fit_levels, one_hot, split, standardize_apply, standardize_fit
from scripts.imputation import TableImputer
from scripts.metrics import MetricBundle, evaluate
from scripts.models.base import make_regressor
from scripts.rainfall import ALL_SCHEMES, AggScheme, RainGrid, attach_rain
from scripts.seeding import derive_seed

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

SUMMARY_KEYS = ("rmse", "rmse_over_sigma", "ks_stat", "ks_p", "kl", "dist_r2", "auc")
# failures a single evaluation turns into report flags
STAGE_ERRORS = (FloodLossError, ValueError)


# ─── SINGLE EVALUATION ────────────────────────────────────────────────────────


def _with_response(table: ClaimTable, rows: np.ndarray) -> np.ndarray:
    return rows[~table.mask[table.schema.response][rows]]


def _fill_remaining_gaps(train: ClaimTable, test: ClaimTable) -> Tuple[ClaimTable, ClaimTable]:
    """Continuous predictors still gapped after imputation take the training mean (0 if none)."""
    for name in train.names_of_kind("continuous"):
        if not (train.mask[name].any() or test.mask[name].any()):
            continue
        observed = train.columns[name][~train.mask[name]]
        fill = float(observed.mean()) if observed.size else 0.0
        logger.warning("Predictor '%s' still has gaps after imputation; filling with %.6g", name, fill)
        for table_name, table in (("train", train), ("test", test)):
            values = np.where(table.mask[name], fill, table.columns[name])
            updated = table.with_column(name, "continuous", values, np.zeros(table.n, dtype=bool))
            if table_name == "train":
                train = updated
            else:
                test = updated
    return train, test


def _try_fit(samples: np.ndarray, label: str, flags: List[str]) -> Optional[FitReport]:
    try:
        report = fit_mle(samples)
    except STAGE_ERRORS as e:
        logger.warning("%s fit failed: %s", label, e)
        flags.append(f"{label}_fit_failed")
        return None
    if report.fallback:
        flags.append(f"{label}_weibull_fallback")
    return report


def evaluate_split(
    table: ClaimTable,
    train_rows: Sequence[int],
    test_rows: Sequence[int],
    experiment: ExperimentConfig,
    seed: int,
    county: str = "",
    label: str = "",
    window: Optional[WindowSpec] = None,
    grid: Optional[RainGrid] = None,
    rain_scheme: Optional[str] = None,
    regressor_kind: Optional[str] = None,
) -> BacktestReport:
    """
    Train on train_rows, bias-correct, and evaluate on test_rows.

    Imputation, encoding levels, scaling, regressor training, distribution
    fits and the quantile map all come from training rows only. Rows without
    a response are dropped from both sides. A stage that fails (rain, imputation,
    encoding, regressor, metrics) ends the evaluation with a `<stage>_failed`
    flag instead of an exception.

    Raises:
        ProtocolError: If a row appears on both sides.
    """
    train_rows = np.asarray(train_rows, dtype=int)
    test_rows = np.asarray(test_rows, dtype=int)
    if np.intersect1d(train_rows, test_rows).size:
        raise ProtocolError("a test row appears in the training slice")
    train_rows = _with_response(table, train_rows)
    test_rows = _with_response(table, test_rows)
    kind = regressor_kind or experiment.regressor
    base = dict(county=county, label=label, window=window, regressor=kind)

    flags: List[str] = []
    if train_rows.size < 2 or test_rows.size == 0:
        flags.append("empty_train" if train_rows.size < 2 else "empty_test")
        logger.warning("Slice %s/%s is empty (train %d, test %d)", county, label, train_rows.size, test_rows.size)
        return BacktestReport(n_train=int(train_rows.size), n_test=int(test_rows.size), flags=tuple(flags), **base)

    def failed(stage: str, error: Exception) -> BacktestReport:
        logger.warning("%s stage failed for %s/%s: %s", stage.capitalize(), county, label, error)
        return BacktestReport(
            n_train=int(train_rows.size), n_test=int(test_rows.size), flags=(f"{stage}_failed",), **base
        )

    train = table.take(train_rows)
    test = table.take(test_rows)
    if grid is not None:
        try:
            scheme = AggScheme.from_token(rain_scheme or experiment.rain_scheme)
            train = attach_rain(train, grid, scheme)
            test = attach_rain(test, grid, scheme)
        except STAGE_ERRORS as e:
            return failed("rain", e)

    try:
        imputer = TableImputer().fit(train)
        train, test = imputer.transform(train), imputer.transform(test)
    except STAGE_ERRORS as e:
        return failed("imputation", e)

    try:
        train, test = _fill_remaining_gaps(derive_date_features(train), derive_date_features(test))
        levels = fit_levels(train)
        train_matrix, test_matrix = one_hot(train, levels), one_hot(test, levels)
        scaler = standardize_fit(train_matrix, np.arange(train_matrix.n))
        train_matrix = standardize_apply(train_matrix, scaler)
        test_matrix = standardize_apply(test_matrix, scaler)
    except STAGE_ERRORS as e:
        return failed("encoding", e)

    regressor_kwargs = {"cycles": experiment.cycles} if kind == "gbt" else {}
    try:
        regressor = make_regressor(kind, n_jobs=1, **regressor_kwargs).fit(
            train_matrix, derive_seed(seed, "regressor")
        )
        pred_train = np.clip(regressor.predict(train_matrix), 0.0, None)
        pred_test = np.clip(regressor.predict(test_matrix), 0.0, None)
    except STAGE_ERRORS as e:
        return failed("regressor", e)
    y_test = test_matrix.y

    ref_fit = _try_fit(train_matrix.y, "ref", flags)
    pred_fit = _try_fit(pred_train, "pred", flags)
    test_ref_fit = _try_fit(y_test, "test_ref", flags)
    test_pred_fit = _try_fit(pred_test, "test_pred", flags)
    test_ref = test_ref_fit.dist if test_ref_fit else None

    try:
        before = evaluate(
            pred_test,
            y_test,
            test_ref,
            test_pred_fit.dist if test_pred_fit else None,
            derive_seed(seed, "auc-before"),
        )
        after: Optional[MetricBundle] = None
        corrected_fit: Optional[FitReport] = None
        if ref_fit is not None and pred_fit is not None:
            quantile_map = build_quantile_map(pred_fit.dist, ref_fit.dist)
            corrected = apply_quantile_map(quantile_map, pred_test)
            corrected_fit = _try_fit(corrected, "corrected", flags)
            after = evaluate(
                corrected,
                y_test,
                test_ref,
                corrected_fit.dist if corrected_fit else None,
                derive_seed(seed, "auc-after"),
            )
        else:
            flags.append("no_bias_correction")
    except STAGE_ERRORS as e:
        return failed("metrics", e)

    report = BacktestReport(
        before=before,
        after=after,
        pred_fit=pred_fit,
        ref_fit=ref_fit,
        corrected_fit=corrected_fit,
        test_ref_fit=test_ref_fit,
        n_train=train_matrix.n,
        n_test=test_matrix.n,
        hyperparameters=regressor.report(),
        importance=tuple(regressor.importance() or ()),
        flags=tuple(flags),
        **base,
    )
    logger.info(
        "Evaluated %s/%s: train %d, test %d, R2 before %s after %s",
        county,
        label,
        report.n_train,
        report.n_test,
        before.dist_r2,
        after.dist_r2 if after else None,
    )
    return report


# ─── PROTOCOLS ────────────────────────────────────────────────────────────────


def window_rows(table: ClaimTable, spec: WindowSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices of the training years and the test year."""
    years = loss_years(table)
    first, last = spec.train_range
    train = np.flatnonzero((years >= first) & (years <= last))
    test = np.flatnonzero(years == spec.test_year)
    return train, test


def run_window(
    table: ClaimTable,
    spec: WindowSpec,
    experiment: ExperimentConfig,
    county: str = "",
    grid: Optional[RainGrid] = None,
    rain_scheme: Optional[str] = None,
) -> BacktestReport:
    """Trains on the window's training years and evaluates its test year."""
    train, test = window_rows(table, spec)
    seed = derive_seed(experiment.seed, "window", county, spec.mode, spec.k)
    return evaluate_split(
        table,
        train,
        test,
        experiment,
        seed,
        county=county,
        label=str(spec.test_year),
        window=spec,
        grid=grid,
        rain_scheme=rain_scheme,
    )


def run_backtest(
    table: ClaimTable,
    experiment: ExperimentConfig,
    county: str = "",
    grid: Optional[RainGrid] = None,
) -> List[BacktestReport]:
    """Every window of the experiment's plan, run by a bounded joblib pool."""
    plan = window_plan(experiment.baseline, experiment.offset, experiment.mode, experiment.last_test_year)
    logger.info("Running %d %s windows for county '%s'", len(plan), experiment.mode, county)
    return Parallel(n_jobs=experiment.jobs)(
        delayed(run_window)(table, spec, experiment, county, grid) for spec in plan
    )


@dataclass
class RepeatSummary:
    reports: List[BacktestReport]
    stats: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"stats": self.stats, "reports": [r.to_dict() for r in self.reports]}


def summarize(reports: Sequence[BacktestReport]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Mean, min and max per metric and stage over the reports carrying it."""
    stats: Dict[str, Dict[str, Dict[str, float]]] = {}
    for stage in ("before", "after"):
        stage_stats = {}
        for key in SUMMARY_KEYS:
            values = [v for v in (metric_value(r, key, stage) for r in reports) if v is not None]
            if values:
                stage_stats[key] = {
                    "mean": float(np.mean(values)),
                    "min": float(np.min(values)),
                    "max": float(np.max(values)),
                    "count": len(values),
                }
        stats[stage] = stage_stats
    return stats


def repeated_split_eval(
    table: ClaimTable,
    repeats: int,
    seed: int,
    experiment: ExperimentConfig,
    kind: Optional[str] = None,
    county: str = "",
    grid: Optional[RainGrid] = None,
) -> RepeatSummary:
    """
    Repeated random train/test splits of all claims with a response.

    Each repeat draws a fresh split with its own derived seed; the regressor's
    own learn/validate split happens inside training.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    usable = _with_response(table, np.arange(table.n))
    if usable.size < 2:
        raise ProtocolError("repeated splits need at least 2 claims with a response")

    def one_repeat(r: int) -> BacktestReport:
        train_pos, test_pos = split(usable.size, experiment.split_ratio, derive_seed(seed, "repeat", r))
        return evaluate_split(
            table,
            usable[train_pos],
            usable[test_pos],
            experiment,
            derive_seed(seed, "repeat-fit", r),
            county=county,
            label=f"repeat{r}",
            grid=grid,
            regressor_kind=kind,
        )

    reports = Parallel(n_jobs=experiment.jobs)(delayed(one_repeat)(r) for r in range(repeats))
    return RepeatSummary(reports=list(reports), stats=summarize(reports))


def group_loo(
    table: ClaimTable,
    experiment: ExperimentConfig,
    labels: Optional[np.ndarray] = None,
    county: str = "",
    grid: Optional[RainGrid] = None,
) -> List[BacktestReport]:
    """
    Leave-one-event-out: each distinct label is the test set once.

    Args:
        labels: Event id per row; defaults to the experiment's label field.
            Rows with an empty label are never tested and always trained on.

    Raises:
        ProtocolError: If fewer than 2 labels exist or one label covers every row.
    """
    if labels is None:
        name = experiment.label_field
        if name not in table.columns:
            raise ProtocolError(f"label field '{name}' is not in the table")
        labels = np.where(table.mask[name], "", table.columns[name]).astype(object)
    labels = np.asarray(labels, dtype=object)
    if labels.size != table.n:
        raise ProtocolError("one event label per row is required")
    distinct = sorted(set(labels.tolist()) - {""})
    if len(distinct) < 2:
        raise ProtocolError(f"leave-one-out needs at least 2 event labels, got {len(distinct)}")
    for value in distinct:
        if np.all(labels == value):
            raise ProtocolError(f"label '{value}' covers every row")

    def one_label(i: int, value: str) -> BacktestReport:
        test = np.flatnonzero(labels == value)
        train = np.flatnonzero(labels != value)
        return evaluate_split(
            table,
            train,
            test,
            experiment,
            derive_seed(experiment.seed, "loo", value),
            county=county,
            label=f"event-{value}",
            grid=grid,
        )

    return list(Parallel(n_jobs=experiment.jobs)(delayed(one_label)(i, v) for i, v in enumerate(distinct)))


def protocol_correlation(
    reports_a: Sequence[BacktestReport],
    reports_b: Sequence[BacktestReport],
    key: str = "dist_r2",
    stage: str = "after",
) -> float:
    """
    Pearson correlation of two claim-weighted per-year metric series.

    Raises:
        ProtocolError: If fewer than two test years carry the metric in both series.
    """

    def yearly(reports: Sequence[BacktestReport]) -> Dict[int, float]:
        sums: Dict[int, List[float]] = {}
        for report in reports:
            value = metric_value(report, key, stage)
            if report.year is None or value is None or report.n_test <= 0:
                continue
            total = sums.setdefault(report.year, [0.0, 0.0])
            total[0] += value * report.n_test
            total[1] += report.n_test
        return {year: s / w for year, (s, w) in sums.items()}

    a, b = yearly(reports_a), yearly(reports_b)
    years = sorted(set(a) & set(b))
    if len(years) < 2:
        raise ProtocolError("correlation needs at least two common test years")
    series_a = np.array([a[y] for y in years])
    series_b = np.array([b[y] for y in years])
    if np.ptp(series_a) == 0 or np.ptp(series_b) == 0:
        raise ProtocolError("a constant series has no correlation")
    return float(np.corrcoef(series_a, series_b)[0, 1])


def compare_rain_schemes(
    table: ClaimTable,
    grid: RainGrid,
    spec: WindowSpec,
    experiment: ExperimentConfig,
    county: str = "",
    schemes: Sequence[str] = ALL_SCHEMES,
) -> Dict[str, Optional[float]]:
    """After-correction distributional R2 of one window under each rain aggregation scheme."""
    results = {}
    for scheme in schemes:
        report = run_window(table, spec, experiment, county, grid, rain_scheme=scheme)
        results[scheme] = metric_value(report, "dist_r2", "after")
        logger.info("Rain scheme %s: R2 after correction %s", scheme, results[scheme])
    return results


def with_manifest(reports: Sequence[BacktestReport], manifest_id: str) -> List[BacktestReport]:
    return [replace(report, manifest_id=manifest_id) for report in reports]
