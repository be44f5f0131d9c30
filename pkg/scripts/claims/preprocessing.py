import datetime as dt
from dataclasses import dataclass, field
from typing import Dict, TextIO

import numpy as np
import pandas as pd

from utils import load_config, setup_logger, section
from .table import (
    ClaimTable,
    Flag,
    loss_years,
    YEAR_MISSING,
    CPI_YEAR_UNCOVERED,
    CONSTRUCTION_REPAIRED,
    CONSTRUCTION_REPAIR_CAPPED,
)

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

DEFAULT_BASE_YEAR = int(section(config, "claims").get("cpi_base_year", 2020))
DEFAULT_REPAIR_CAP = int(section(config, "claims").get("construction_repair_cap", 3))

# month index origin: January 1960 is month 0
_EPOCH_OFFSET_MONTHS = (1970 - 1960) * 12


@dataclass(frozen=True)
class CpiTable:
    """Consumer price index by calendar year, with the base year amounts are expressed in."""

    index: Dict[int, float] = field(default_factory=dict)
    base_year: int = DEFAULT_BASE_YEAR

    def __post_init__(self):
        for year, value in self.index.items():
            if not isinstance(year, int):
                raise TypeError(f"CPI year must be int, got {type(year).__name__}")
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"CPI value for {year} must be finite and > 0, got {value}")
        if self.base_year not in self.index:
            raise ValueError(f"CPI table does not cover the base year {self.base_year}")

    def covers(self, year: int) -> bool:
        return year in self.index

    def factor(self, year: int) -> float:
        return self.index[self.base_year] / self.index[year]


def parse_cpi(stream: TextIO, base_year: int = DEFAULT_BASE_YEAR) -> CpiTable:
    """
    Reads a two-column (year, index) comma-separated file; a header row is optional.
    """
    frame = pd.read_csv(stream, header=None, dtype=str, keep_default_na=False)
    index = {}
    for year_text, value_text in frame.iloc[:, :2].itertuples(index=False):
        try:
            year = int(float(year_text))
        except ValueError:
            continue  # header row
        index[year] = float(value_text)
    return CpiTable(index=index, base_year=base_year)


def read_cpi(path, base_year: int = DEFAULT_BASE_YEAR) -> CpiTable:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return parse_cpi(f, base_year=base_year)


def adjust_inflation(table: ClaimTable, cpi: CpiTable) -> ClaimTable:
    """
    Expresses every monetary field in base-year dollars: v * CPI(base) / CPI(year).

    Rows whose loss year is unknown or outside the CPI table keep their values
    and are flagged.
    """
    years = loss_years(table)
    factors = np.ones(table.n)
    flags = []
    for row, year in enumerate(years):
        if year < 0:
            flags.append(Flag(row, "yearOfLoss", YEAR_MISSING))
        elif not cpi.covers(int(year)):
            flags.append(Flag(row, "yearOfLoss", CPI_YEAR_UNCOVERED))
        else:
            factors[row] = cpi.factor(int(year))

    adjusted = table
    for name in table.schema.monetary_fields():
        if name not in table.columns:
            continue
        values = table.columns[name] * factors
        adjusted = adjusted.with_column(name, "continuous", values, table.mask[name])
    if flags:
        logger.warning("%d rows could not be inflation adjusted", len(flags))
    logger.info("Adjusted monetary fields to %d dollars", cpi.base_year)
    return adjusted.with_flags(flags)


def _minus_century(day: dt.date) -> dt.date:
    try:
        return day.replace(year=day.year - 100)
    except ValueError:
        # 29 February in a year that is not leap a century earlier
        return day.replace(year=day.year - 100, day=28)


def fix_construction_dates(table: ClaimTable, repair_cap: int = DEFAULT_REPAIR_CAP) -> ClaimTable:
    """
    Subtracts 100 years from originalConstructionDate while it is after dateOfLoss.

    Repairs stop after `repair_cap` subtractions; rows still inconsistent are
    flagged as capped. Equal dates count as consistent. Tables without both
    date columns are returned unchanged.
    """
    if "dateOfLoss" not in table.columns or "originalConstructionDate" not in table.columns:
        logger.info("No construction-date repair: dateOfLoss or originalConstructionDate absent")
        return table
    loss = table.columns["dateOfLoss"]
    construction = table.columns["originalConstructionDate"].copy()
    both = ~table.mask["dateOfLoss"] & ~table.mask["originalConstructionDate"]
    flags = []
    for row in np.flatnonzero(both & (construction > loss)):
        loss_day = loss[row].astype(dt.date)
        day = construction[row].astype(dt.date)
        repairs = 0
        while day > loss_day and repairs < repair_cap:
            day = _minus_century(day)
            repairs += 1
        construction[row] = np.datetime64(day, "D")
        code = CONSTRUCTION_REPAIR_CAPPED if day > loss_day else CONSTRUCTION_REPAIRED
        flags.append(Flag(int(row), "originalConstructionDate", code))
    capped = sum(1 for flag in flags if flag.code == CONSTRUCTION_REPAIR_CAPPED)
    if capped:
        logger.warning("%d construction dates still follow the loss date after %d repairs", capped, repair_cap)
    logger.info("Repaired %d construction dates", len(flags) - capped)
    return table.with_column(
        "originalConstructionDate", "date", construction, table.mask["originalConstructionDate"]
    ).with_flags(flags)


def month_index(day) -> int:
    """Months since January 1960 (which maps to 0)."""
    if isinstance(day, np.datetime64):
        day = day.astype(dt.date)
    return (day.year - 1960) * 12 + (day.month - 1)


def month_index_array(days: np.ndarray) -> np.ndarray:
    """Vectorised month_index; NaT maps to NaN."""
    days = np.asarray(days, dtype="datetime64[D]")
    months = days.astype("datetime64[M]")
    out = months.astype("int64").astype(float) + _EPOCH_OFFSET_MONTHS
    out[np.isnat(days)] = np.nan
    return out


def derive_date_features(table: ClaimTable) -> ClaimTable:
    """
    Adds continuous month-index columns for each date field and the building age at loss.

    Call after date imputation so that the derived columns inherit no gaps.
    """
    derived = table
    for name in table.names_of_kind("date"):
        values = month_index_array(table.columns[name])
        derived = derived.with_column(f"{name}_mi", "continuous", values, np.isnan(values))
    if "dateOfLoss" in table.columns and "originalConstructionDate" in table.columns:
        span = (table.columns["dateOfLoss"] - table.columns["originalConstructionDate"]).astype(
            "timedelta64[D]"
        )
        age = span.astype("int64").astype(float) / 365.25
        gap = np.isnat(span)
        age[gap] = np.nan
        derived = derived.with_column("buildingAgeYears", "continuous", age, gap)
    return derived
