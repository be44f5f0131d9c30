import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils import ensure_directories, env_override, load_config, section, setup_logger
from scripts.backtest import (
    BacktestReport,
    ExperimentConfig,
    group_loo,
    load_experiment,
    read_reports,
    repeated_split_eval,
    run_backtest,
    synthetic_county,
    weighted_aggregate,
    with_manifest,
    write_plot_data,
    write_report,
    write_summary,
)
from scripts.claims import (
    ClaimTable,
    adjust_inflation,
    fix_construction_dates,
    load_schema,
    missing_profile,
    read_claims,
    read_cpi,
    write_claims,
)
from scripts.errors import ConfigError, FloodLossError, SchemaError
from scripts.manifest import RunManifest, write_manifest
from scripts.rainfall import RainGrid, read_rain_grid

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
FORMATS = ("csv", "json")
AGGREGATE_KEYS = ("dist_r2", "ks_p", "kl", "auc", "rmse_over_sigma")
# run-location settings that do not change results
_UNTRACKED_KEYS = ("out", "jobs")


def _default_out() -> Path:
    return Path(__file__).parent / section(config, "directories").get("reports", "data/reports")


def _load_table(claims: str, schema_path: Optional[str], cpi_path: Optional[str]) -> ClaimTable:
    """Parse, inflation-adjust (when a CPI table is given) and repair construction dates."""
    schema = load_schema(Path(schema_path) if schema_path else None)
    try:
        table = read_claims(claims, schema)
    except FileNotFoundError as e:
        raise ConfigError("claims", f"file not found: {claims}") from e
    if cpi_path:
        try:
            cpi = read_cpi(cpi_path, base_year=int(section(config, "claims").get("cpi_base_year", 2020)))
        except FileNotFoundError as e:
            raise ConfigError("cpi", f"file not found: {cpi_path}") from e
        table = adjust_inflation(table, cpi)
    return fix_construction_dates(table)


# ─── COMMANDS ───────────────────────────────────────────────────────────────────────


def cmd_ingest(claims: str, cpi: Optional[str], schema: Optional[str], out: Optional[str]) -> int:
    """
    Preprocesses a claims file and writes the cleaned table plus its flags sidecar.

    Returns:
        int: Exit code.
    """
    if not claims:
        print("❌ ingest needs --claims")
        return EXIT_USAGE
    table = _load_table(claims, schema, cpi)
    out_dir = Path(out) if out else _default_out()
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "claims_clean.csv"
    write_claims(table, target)

    profile = missing_profile(table)
    if table.n == 0:
        logger.warning("Claims file %s has no rows", claims)
        print(f"⚠️  {claims} holds no claims (n=0)")
    print(f"📄 Ingested {profile['rows']} claims -> {target}")
    print(
        f"   Missing fields per record: {profile['mean_missing_per_record']:.2f} "
        f"± {profile['std_missing_per_record']:.2f}"
    )
    for name, rate in sorted(profile["per_field"].items(), key=lambda item: -item[1]):
        if rate > 0:
            print(f"   {name:<40} {rate:7.2%}")
    print(f"   Flags raised: {len(table.flags)}")
    return EXIT_OK


def _county_tables(experiment: ExperimentConfig) -> Tuple[List[Tuple[str, ClaimTable]], Optional[RainGrid], List[str]]:
    """(county, table) pairs for the experiment, the rain grid, and the input files read."""
    if experiment.synthetic:
        fixture = synthetic_county(
            n=experiment.synthetic_rows,
            seed=experiment.seed,
            first_year=experiment.baseline,
            last_year=experiment.last_test_year,
            with_rain=experiment.rain,
        )
        county = str(fixture.table.columns["countyCode"][0]) if fixture.table.n else "synthetic"
        return [(county, fixture.table)], fixture.grid, []

    table = _load_table(experiment.claims, experiment.schema, experiment.cpi)
    grid = None
    if experiment.rain:
        try:
            grid = read_rain_grid(experiment.rain_grid)
        except FileNotFoundError as e:
            raise ConfigError("rain_grid", f"file not found: {experiment.rain_grid}") from e
    inputs = [p for p in (experiment.claims, experiment.cpi, experiment.schema, experiment.rain_grid) if p]
    if not experiment.counties:
        return [("all", table)], grid, inputs

    codes = np.where(table.mask["countyCode"], "", table.columns["countyCode"]).astype(str)
    pairs = []
    for county in experiment.counties:
        rows = np.flatnonzero(codes == county)
        if rows.size == 0:
            logger.warning("County %s has no claims in %s", county, experiment.claims)
        pairs.append((county, table.take(rows)))
    return pairs, grid, inputs


def _run_protocol(experiment: ExperimentConfig, county: str, table: ClaimTable, grid) -> List[BacktestReport]:
    if experiment.protocol == "repeated":
        return repeated_split_eval(table, experiment.repeats, experiment.seed, experiment, county=county, grid=grid).reports
    if experiment.protocol == "loo":
        return group_loo(table, experiment, county=county, grid=grid)
    return run_backtest(table, experiment, county=county, grid=grid)


def _print_aggregates(reports: Sequence[BacktestReport]) -> None:
    print("📊 Claim-weighted aggregates (before -> after correction):")
    for key in AGGREGATE_KEYS:
        values = []
        for stage in ("before", "after"):
            try:
                values.append(f"{weighted_aggregate(reports, key, stage):.4f}")
            except ValueError:
                values.append("n/a")
        print(f"   {key:<16} {values[0]:>8} -> {values[1]}")


def cmd_backtest(config_path: Optional[str], overrides: Optional[dict] = None, fmt: str = "csv") -> int:
    """
    Runs the configured protocol over every selected county and writes reports,
    the summary table, plot data and the run manifest.

    Returns:
        int: Exit code.
    """
    if fmt not in FORMATS:
        print(f"❌ unknown format '{fmt}', expected one of {FORMATS}")
        return EXIT_USAGE
    experiment = load_experiment(Path(config_path) if config_path else None, overrides)
    out_dir = Path(experiment.out) if experiment.out else _default_out()
    out_dir.mkdir(parents=True, exist_ok=True)

    tables, grid, inputs = _county_tables(experiment)
    snapshot = {k: v for k, v in experiment.to_dict().items() if k not in _UNTRACKED_KEYS}
    manifest = RunManifest.start(snapshot, experiment.seed, inputs)
    print(f"🏗️  Backtest ({experiment.protocol}, {experiment.mode}) over {len(tables)} county table(s)")

    reports: List[BacktestReport] = []
    for county, table in tables:
        try:
            county_reports = _run_protocol(experiment, county, table, grid)
        except FloodLossError as e:
            logger.error("County %s failed: %s", county, e)
            print(f"❌ County {county}: {e}")
            manifest.mark(f"county:{county}", "failed")
            continue
        manifest.mark(f"county:{county}", "ok")
        print(f"   ✅ County {county}: {len(county_reports)} reports")
        reports.extend(county_reports)

    if not reports:
        manifest.finish()
        write_manifest(manifest, out_dir)
        print("❌ No reports were produced")
        return EXIT_FAILURE

    reports = with_manifest(reports, manifest.manifest_id)
    for report in reports:
        write_report(report, out_dir)
    summary_path = write_summary(reports, out_dir / f"summary.{fmt}", fmt)
    write_plot_data(reports, out_dir, fmt)
    manifest.mark("reports", "ok")
    manifest.finish()
    write_manifest(manifest, out_dir)

    print(f"📝 Wrote {len(reports)} reports and {summary_path}")
    _print_aggregates(reports)
    return EXIT_OK


def cmd_report(reports_dir: str, fmt: str = "csv", out: Optional[str] = None) -> int:
    """
    Merges report files into the summary table and per-county plot data.

    Returns:
        int: Exit code.
    """
    if fmt not in FORMATS:
        print(f"❌ unknown format '{fmt}', expected one of {FORMATS}")
        return EXIT_USAGE
    source = Path(reports_dir)
    reports = read_reports(source) if source.is_dir() else []
    if not reports:
        print(f"❌ No reports found in {source}")
        return EXIT_FAILURE
    out_dir = Path(out) if out else source
    summary_path = write_summary(reports, out_dir / f"summary.{fmt}", fmt)
    plots = write_plot_data(reports, out_dir, fmt)
    print(f"📝 {len(reports)} summary rows -> {summary_path}")
    for path in plots:
        print(f"   📈 {path}")
    return EXIT_OK


# ─── ARGUMENTS ──────────────────────────────────────────────────────────────────────


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--claims", help="Claims CSV in the NFIP schema")
    parser.add_argument("--cpi", help="CPI table CSV (year,cpi)")
    parser.add_argument("--schema", help="Schema registry YAML (defaults to the bundled NFIP schema)")
    parser.add_argument("--config", help="Experiment YAML")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--jobs", type=int, help="Worker processes for windows, repeats and folds")
    parser.add_argument("--synthetic", action="store_true", default=None, help="Use the generated fixture county")
    parser.add_argument("--format", choices=FORMATS, help="Summary and plot-data format")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Flood-loss regression, bias correction and backtesting.")
    commands = parser.add_subparsers(dest="command", required=True)
    _add_common(commands.add_parser("ingest", help="Preprocess a claims file"))
    _add_common(commands.add_parser("backtest", help="Run an experiment"))
    report = commands.add_parser("report", help="Merge reports into summary and plot data")
    report.add_argument("reports_dir", help="Directory holding report JSON files")
    _add_common(report)
    return parser.parse_args(argv)


def _resolve(args: argparse.Namespace, name: str, cast=str):
    """Explicit flag, then FLOODLOSS_<NAME>, then None."""
    value = getattr(args, name)
    if value is not None:
        return value
    raw = env_override(name)
    if raw is None:
        return None
    try:
        return cast(raw)
    except ValueError as e:
        raise ConfigError(name, f"invalid environment value {raw!r}") from e


def _flag(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    lowered = str(raw).strip().lower()
    if lowered not in ("true", "false", "1", "0", "yes", "no"):
        raise ValueError(raw)
    return lowered in ("true", "1", "yes")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    ensure_directories()
    try:
        fmt = _resolve(args, "format") or "csv"
        if args.command == "ingest":
            return cmd_ingest(
                _resolve(args, "claims"), _resolve(args, "cpi"), _resolve(args, "schema"), _resolve(args, "out")
            )
        if args.command == "backtest":
            overrides = {
                "claims": _resolve(args, "claims"),
                "cpi": _resolve(args, "cpi"),
                "schema": _resolve(args, "schema"),
                "out": _resolve(args, "out"),
                "seed": _resolve(args, "seed", int),
                "jobs": _resolve(args, "jobs", int),
                "synthetic": _resolve(args, "synthetic", _flag),
            }
            return cmd_backtest(_resolve(args, "config"), overrides, fmt)
        return cmd_report(args.reports_dir, fmt, _resolve(args, "out"))
    except (ConfigError, SchemaError) as e:
        logger.error("Usage error: %s", e)
        print(f"❌ {e}")
        return EXIT_USAGE
    except FloodLossError as e:
        logger.error("Run failed: %s", e)
        print(f"❌ {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
