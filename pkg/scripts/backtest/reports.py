from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils import load_config, load_from_json, save_to_json, setup_logger, section
from scripts.backtest.windows import WindowSpec
from scripts.distributions import FitReport
from scripts.metrics import MetricBundle

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

ALPHA = float(section(config, "metrics").get("alpha", 0.05))
SUMMARY_COLUMNS = ["year", "county", "label", "mode", "stage", "r2", "ks_p", "kl", "auc", "n"]
PLOT_COLUMNS = ["year", "r2", "ks_p", "alpha", "n"]


@dataclass(frozen=True)
class BacktestReport:
    """Everything one train/test evaluation produced, flags included."""

    county: str
    label: str
    window: Optional[WindowSpec] = None
    before: Optional[MetricBundle] = None
    after: Optional[MetricBundle] = None
    pred_fit: Optional[FitReport] = None
    ref_fit: Optional[FitReport] = None
    corrected_fit: Optional[FitReport] = None
    test_ref_fit: Optional[FitReport] = None
    n_train: int = 0
    n_test: int = 0
    regressor: str = ""
    hyperparameters: dict = field(default_factory=dict)
    importance: Tuple[Tuple[str, float], ...] = ()
    flags: Tuple[str, ...] = ()
    manifest_id: str = ""

    def __post_init__(self):
        if self.after is not None and (self.pred_fit is None or self.ref_fit is None):
            raise ValueError("an after-correction bundle requires both training fits")
        for bundle in (self.before, self.after):
            if bundle is not None and bundle.n_test != self.n_test:
                raise ValueError("metric bundle test count disagrees with the report")

    @property
    def empty(self) -> bool:
        return self.n_train == 0 or self.n_test == 0

    @property
    def best(self) -> Optional[MetricBundle]:
        """After-correction bundle when present, else the raw one."""
        return self.after if self.after is not None else self.before

    @property
    def year(self) -> Optional[int]:
        return self.window.test_year if self.window is not None else None

    def to_dict(self) -> dict:
        def opt(value):
            return value.to_dict() if value is not None else None

        return {
            "county": self.county,
            "label": self.label,
            "window": opt(self.window),
            "before": opt(self.before),
            "after": opt(self.after),
            "pred_fit": opt(self.pred_fit),
            "ref_fit": opt(self.ref_fit),
            "corrected_fit": opt(self.corrected_fit),
            "test_ref_fit": opt(self.test_ref_fit),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "regressor": self.regressor,
            "hyperparameters": self.hyperparameters,
            "importance": [[name, value] for name, value in self.importance],
            "flags": list(self.flags),
            "manifest_id": self.manifest_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BacktestReport":
        def opt(key, loader):
            return loader(data[key]) if data.get(key) is not None else None

        return cls(
            county=data["county"],
            label=data["label"],
            window=opt("window", WindowSpec.from_dict),
            before=opt("before", MetricBundle.from_dict),
            after=opt("after", MetricBundle.from_dict),
            pred_fit=opt("pred_fit", FitReport.from_dict),
            ref_fit=opt("ref_fit", FitReport.from_dict),
            corrected_fit=opt("corrected_fit", FitReport.from_dict),
            test_ref_fit=opt("test_ref_fit", FitReport.from_dict),
            n_train=int(data["n_train"]),
            n_test=int(data["n_test"]),
            regressor=data.get("regressor", ""),
            hyperparameters=dict(data.get("hyperparameters") or {}),
            importance=tuple((str(n), float(v)) for n, v in data.get("importance", [])),
            flags=tuple(data.get("flags", [])),
            manifest_id=data.get("manifest_id", ""),
        )


def report_filename(report: BacktestReport) -> str:
    mode = report.window.mode if report.window is not None else "split"
    safe_label = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in report.label)
    return f"{report.county or 'all'}_{mode}_{safe_label}.json"


def write_report(report: BacktestReport, directory: Path) -> Path:
    path = Path(directory) / report_filename(report)
    save_to_json(report.to_dict(), path)
    return path


def read_report(path: Path) -> BacktestReport:
    data = load_from_json(path)
    if not data:
        raise ValueError(f"no report found in {path}")
    return BacktestReport.from_dict(data)


def read_reports(directory: Path) -> List[BacktestReport]:
    """Every report JSON in a directory, in file name order."""
    paths = sorted(p for p in Path(directory).glob("*.json") if p.name != "manifest.json")
    return [read_report(path) for path in paths]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_frame(reports: Sequence[BacktestReport]) -> pd.DataFrame:
    """One row per report: after-correction metrics where available, raw otherwise."""
    rows = []
    for report in reports:
        bundle = report.best
        stage = "after" if report.after is not None else ("before" if bundle is not None else "empty")
        rows.append(
            [
                _cell(report.year),
                report.county,
                report.label,
                report.window.mode if report.window is not None else "",
                stage,
                _cell(bundle.dist_r2 if bundle else None),
                _cell(bundle.ks_p if bundle else None),
                _cell(bundle.kl if bundle else None),
                _cell(bundle.auc if bundle else None),
                _cell(report.n_test),
            ]
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def write_summary(reports: Sequence[BacktestReport], path: Path, fmt: str = "csv") -> Path:
    """Combined summary table as comma-separated text or a JSON list."""
    path = Path(path)
    frame = summary_frame(reports)
    if fmt == "csv":
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
    elif fmt == "json":
        save_to_json(frame.to_dict(orient="records"), path)
    else:
        raise ValueError(f"unknown format '{fmt}', expected csv or json")
    return path


def plot_data(reports: Sequence[BacktestReport]) -> Dict[str, pd.DataFrame]:
    """
    Per-county tables of test year vs R2 and K-S p-value.

    Each row carries the significance level so a reference line can be drawn
    at p = alpha.
    """
    grouped: Dict[str, List[list]] = {}
    for report in reports:
        bundle = report.best
        if report.year is None or bundle is None:
            continue
        grouped.setdefault(report.county, []).append(
            [
                report.year,
                _cell(bundle.dist_r2),
                _cell(bundle.ks_p),
                _cell(ALPHA),
                report.n_test,
            ]
        )
    return {
        county: pd.DataFrame(sorted(rows, key=lambda row: row[0]), columns=PLOT_COLUMNS)
        for county, rows in sorted(grouped.items())
    }


def write_plot_data(reports: Sequence[BacktestReport], directory: Path, fmt: str = "csv") -> List[Path]:
    paths = []
    for county, frame in plot_data(reports).items():
        if fmt == "csv":
            path = Path(directory) / f"plot_{county}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=False, lineterminator="\n")
        elif fmt == "json":
            path = Path(directory) / f"plot_{county}.json"
            save_to_json(frame.to_dict(orient="records"), path)
        else:
            raise ValueError(f"unknown format '{fmt}', expected csv or json")
        paths.append(path)
    return paths


def metric_value(report: BacktestReport, key: str, stage: str = "after") -> Optional[float]:
    bundle = report.after if stage == "after" else report.before
    if bundle is None:
        return None
    value = bundle.to_dict().get(key)
    if value is None:
        return None
    return float(value)


def weighted_aggregate(reports: Sequence[BacktestReport], key: str, stage: str = "after") -> float:
    """
    Claim-weighted mean of a metric: sum(metric * n_test) / sum(n_test).

    Reports without the metric or without test claims are skipped with a warning.

    Raises:
        ValueError: If no report carries the metric.
    """
    if not reports:
        raise ValueError("weighted_aggregate needs at least one report")
    values, weights = [], []
    for report in reports:
        value = metric_value(report, key, stage)
        if value is None or report.n_test <= 0:
            logger.warning("Report '%s/%s' has no %s %s; skipped", report.county, report.label, stage, key)
            continue
        values.append(value)
        weights.append(report.n_test)
    if not values:
        raise ValueError(f"no report carries the {stage} metric '{key}'")
    return float(np.dot(values, weights) / np.sum(weights))
