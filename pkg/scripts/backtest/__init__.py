"""
Backtest protocols: year windows, repeated splits, and leave-one-event-out.

Usage:
    from scripts.backtest import ExperimentConfig, run_backtest, weighted_aggregate
    experiment = ExperimentConfig(synthetic=True, cycles=10)
    reports = run_backtest(table, experiment, county="48201")
    print(weighted_aggregate(reports, "dist_r2"))
"""

from .windows import WindowSpec, window_plan
from .experiment import ExperimentConfig, load_experiment
from .reports import (
    BacktestReport,
    read_report,
    read_reports,
    write_report,
    summary_frame,
    write_summary,
    plot_data,
    write_plot_data,
    weighted_aggregate,
)
from .protocol import (
    RepeatSummary,
    evaluate_split,
    run_window,
    run_backtest,
    repeated_split_eval,
    group_loo,
    protocol_correlation,
    compare_rain_schemes,
    window_rows,
    with_manifest,
)
from .synthetic import SyntheticCounty, synthetic_county

__all__ = [
    "WindowSpec",
    "window_plan",
    "ExperimentConfig",
    "load_experiment",
    "BacktestReport",
    "read_report",
    "read_reports",
    "write_report",
    "summary_frame",
    "write_summary",
    "plot_data",
    "write_plot_data",
    "weighted_aggregate",
    "RepeatSummary",
    "evaluate_split",
    "run_window",
    "run_backtest",
    "repeated_split_eval",
    "group_loo",
    "protocol_correlation",
    "compare_rain_schemes",
    "window_rows",
    "with_manifest",
    "SyntheticCounty",
    "synthetic_county",
]
