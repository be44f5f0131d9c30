import datetime as dt
import io
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, TextIO

import numpy as np
import pandas as pd

from utils import load_config, setup_logger
from scripts.errors import SchemaError
from .schema import SchemaRegistry

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

MISSING_TOKEN = "⟨MISSING⟩"

# flag codes written to the sidecar file
COERCION_FAILED = "coercion_failed"
OUT_OF_RANGE = "out_of_range"
UNKNOWN_LEVEL = "unknown_level"
NEGATIVE_RESPONSE = "negative_response"
YEAR_MISSING = "year_missing"
CPI_YEAR_UNCOVERED = "cpi_year_uncovered"
CONSTRUCTION_REPAIRED = "construction_repaired"
CONSTRUCTION_REPAIR_CAPPED = "construction_repair_capped"


@dataclass(frozen=True)
class Flag:
    row: int
    field: str
    code: str


@dataclass(frozen=True)
class ClaimTable:
    """
    Columnar claims table with an explicit missingness mask.

    Storage per kind: continuous columns are float64 (NaN where masked),
    categorical columns are object arrays of str ("" where masked), date
    columns are datetime64[D] (NaT where masked). `kinds` may name columns
    outside the schema (derived predictors such as rain).
    """

    schema: SchemaRegistry
    columns: Dict[str, np.ndarray]
    mask: Dict[str, np.ndarray]
    kinds: Dict[str, str]
    flags: tuple = ()
    coercion_warnings: int = 0

    def __post_init__(self):
        n = None
        for name, values in self.columns.items():
            if name not in self.mask or name not in self.kinds:
                raise ValueError(f"column '{name}' lacks a mask or kind")
            if n is None:
                n = len(values)
            if len(values) != n or len(self.mask[name]) != n:
                raise ValueError(f"column '{name}' does not have {n} entries and mask bits")

    @property
    def n(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    @property
    def field_names(self) -> List[str]:
        return list(self.columns)

    def kind(self, name: str) -> str:
        return self.kinds[name]

    def names_of_kind(self, kind: str, role: Optional[str] = "predictor") -> List[str]:
        """Columns of a kind; derived (non-schema) columns count as predictors."""
        names = []
        for name, column_kind in self.kinds.items():
            if column_kind != kind:
                continue
            field_role = self.schema[name].role if name in self.schema else "predictor"
            if role is None or field_role == role:
                names.append(name)
        return names

    def observed(self, name: str) -> np.ndarray:
        return ~self.mask[name]

    def take(self, rows: Iterable[int]) -> "ClaimTable":
        """Row subset in the given order; flags follow their rows."""
        rows = np.asarray(list(rows) if not isinstance(rows, np.ndarray) else rows, dtype=int)
        position = {int(old): new for new, old in enumerate(rows)}
        flags = tuple(
            Flag(position[flag.row], flag.field, flag.code)
            for flag in self.flags
            if flag.row in position
        )
        return replace(
            self,
            columns={name: values[rows].copy() for name, values in self.columns.items()},
            mask={name: bits[rows].copy() for name, bits in self.mask.items()},
            flags=flags,
        )

    def with_column(
        self, name: str, kind: str, values: np.ndarray, mask: np.ndarray
    ) -> "ClaimTable":
        """Returns a copy with `name` added or replaced."""
        columns = dict(self.columns)
        masks = dict(self.mask)
        kinds = dict(self.kinds)
        columns[name] = values
        masks[name] = np.asarray(mask, dtype=bool)
        kinds[name] = kind
        return replace(self, columns=columns, mask=masks, kinds=kinds)

    def with_flags(self, flags: Iterable[Flag]) -> "ClaimTable":
        return replace(self, flags=self.flags + tuple(flags))

    def flagged_rows(self, code: str) -> np.ndarray:
        return np.array(sorted({flag.row for flag in self.flags if flag.code == code}), dtype=int)


def _empty_column(kind: str, n: int) -> np.ndarray:
    if kind == "continuous":
        return np.full(n, np.nan)
    if kind == "date":
        return np.full(n, np.datetime64("NaT"), dtype="datetime64[D]")
    return np.full(n, "", dtype=object)


def _coerce_continuous(raw: np.ndarray):
    values = np.full(len(raw), np.nan)
    missing = np.zeros(len(raw), dtype=bool)
    failed = np.zeros(len(raw), dtype=bool)
    for i, cell in enumerate(raw):
        text = cell.strip()
        if text == "":
            missing[i] = True
            continue
        try:
            value = float(text)
        except ValueError:
            value = math.nan
        if not math.isfinite(value):
            missing[i] = True
            failed[i] = True
            continue
        values[i] = value
    return values, missing, failed


def _coerce_date(raw: np.ndarray):
    values = np.full(len(raw), np.datetime64("NaT"), dtype="datetime64[D]")
    missing = np.zeros(len(raw), dtype=bool)
    failed = np.zeros(len(raw), dtype=bool)
    for i, cell in enumerate(raw):
        text = cell.strip()
        if text == "":
            missing[i] = True
            continue
        try:
            values[i] = np.datetime64(dt.date.fromisoformat(text[:10]), "D")
        except ValueError:
            missing[i] = True
            failed[i] = True
    return values, missing, failed


def _coerce_categorical(raw: np.ndarray):
    values = np.array([cell.strip() for cell in raw], dtype=object)
    missing = values == ""
    return values, missing, np.zeros(len(raw), dtype=bool)


def _range_violations(name: str, spec, values: np.ndarray, missing: np.ndarray) -> np.ndarray:
    if spec.value_range is None:
        return np.zeros(len(values), dtype=bool)
    low, high = spec.value_range
    bad = np.zeros(len(values), dtype=bool)
    if spec.kind == "continuous":
        if low is not None:
            bad |= values < float(low)
        if high is not None:
            bad |= values > float(high)
    elif spec.kind == "date":
        if low is not None:
            bad |= values < np.datetime64(str(low), "D")
        if high is not None:
            bad |= values > np.datetime64(str(high), "D")
    return bad & ~missing


def parse_claims(stream: TextIO, schema: SchemaRegistry) -> ClaimTable:
    """
    Parses comma-separated claims text into a ClaimTable.

    Cells failing kind coercion become missing and are flagged; no row is
    ever dropped. Columns outside the schema are ignored with a warning.

    Args:
        stream (TextIO): UTF-8 text with a header row. Empty cells are missing.
        schema (SchemaRegistry): Field registry the header is checked against.

    Returns:
        ClaimTable: Table in file row order.

    Raises:
        SchemaError: If the response column is absent or a column name repeats.
    """
    try:
        frame = pd.read_csv(
            stream, header=None, dtype=str, keep_default_na=False, na_filter=False
        )
    except pd.errors.EmptyDataError:
        raise SchemaError(f"missing response column '{schema.response}' (empty file)")

    header = [str(name).strip() for name in frame.iloc[0].tolist()]
    duplicates = sorted({name for name in header if header.count(name) > 1})
    if duplicates:
        raise SchemaError(f"duplicate column names: {duplicates}")
    if schema.response not in header:
        raise SchemaError(f"missing response column '{schema.response}'")

    body = frame.iloc[1:]
    n = len(body)
    unknown = [name for name in header if name not in schema]
    if unknown:
        logger.warning("Ignoring %d columns outside the schema: %s", len(unknown), unknown)

    columns, masks, kinds, flags = {}, {}, {}, []
    warnings = 0
    for position, name in enumerate(header):
        if name not in schema:
            continue
        spec = schema[name]
        raw = body.iloc[:, position].to_numpy(dtype=object)
        if spec.kind == "continuous":
            values, missing, failed = _coerce_continuous(raw)
        elif spec.kind == "date":
            values, missing, failed = _coerce_date(raw)
        else:
            values, missing, failed = _coerce_categorical(raw)

        for row in np.flatnonzero(failed):
            flags.append(Flag(int(row), name, COERCION_FAILED))
        warnings += int(failed.sum())

        if spec.role == "response":
            negative = (values < 0) & ~missing
            for row in np.flatnonzero(negative):
                flags.append(Flag(int(row), name, NEGATIVE_RESPONSE))
            values = np.where(negative, np.nan, values)
            missing = missing | negative

        for row in np.flatnonzero(_range_violations(name, spec, values, missing)):
            flags.append(Flag(int(row), name, OUT_OF_RANGE))
        if spec.levels is not None:
            allowed = set(spec.levels)
            for row in np.flatnonzero(~missing):
                if values[row] not in allowed:
                    flags.append(Flag(int(row), name, UNKNOWN_LEVEL))

        columns[name], masks[name], kinds[name] = values, missing, spec.kind

    if warnings:
        logger.warning("Coercion failed for %d cells; they were marked missing", warnings)
    logger.info("Parsed %d claims with %d columns", n, len(columns))
    return ClaimTable(
        schema=schema,
        columns=columns,
        mask=masks,
        kinds=kinds,
        flags=tuple(sorted(flags, key=lambda f: (f.row, f.field, f.code))),
        coercion_warnings=warnings,
    )


def _format_cells(values: np.ndarray, missing: np.ndarray, kind: str) -> List[str]:
    cells = []
    for value, is_missing in zip(values, missing):
        if is_missing:
            cells.append("")
        elif kind == "continuous":
            cells.append(repr(float(value)))
        elif kind == "date":
            cells.append(str(value))
        else:
            cells.append(str(value))
    return cells


def serialize_claims(table: ClaimTable, stream: TextIO) -> None:
    """Writes the table back in the ingest format; floats in shortest round-trip form."""
    frame = pd.DataFrame(
        {
            name: _format_cells(table.columns[name], table.mask[name], table.kinds[name])
            for name in table.field_names
        },
        columns=table.field_names,
    )
    frame.to_csv(stream, index=False, lineterminator="\n")


def serialize_flags(table: ClaimTable, stream: TextIO) -> None:
    """Writes the (row, field, flag-code) sidecar."""
    frame = pd.DataFrame(
        [(flag.row, flag.field, flag.code) for flag in table.flags],
        columns=["row", "field", "flag"],
    )
    frame.to_csv(stream, index=False, lineterminator="\n")


def parse_flags(stream: TextIO) -> List[Flag]:
    frame = pd.read_csv(stream, dtype={"row": int, "field": str, "flag": str})
    return [Flag(int(r.row), r.field, r.flag) for r in frame.itertuples(index=False)]


def read_claims(path, schema: SchemaRegistry) -> ClaimTable:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return parse_claims(f, schema)


def write_claims(table: ClaimTable, path, flags_path=None) -> None:
    """Writes the claims file and, next to it, the flags sidecar."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        serialize_claims(table, f)
    flags_path = flags_path or f"{path}.flags.csv"
    with open(flags_path, "w", encoding="utf-8", newline="") as f:
        serialize_flags(table, f)


def table_to_text(table: ClaimTable) -> str:
    buffer = io.StringIO()
    serialize_claims(table, buffer)
    return buffer.getvalue()


def loss_years(table: ClaimTable) -> np.ndarray:
    """
    Loss year per row as int, -1 where unknown.

    Uses yearOfLoss and falls back to the year of dateOfLoss.
    """
    years = np.full(table.n, -1, dtype=int)
    if "yearOfLoss" in table.columns:
        tokens = table.columns["yearOfLoss"]
        for i in np.flatnonzero(~table.mask["yearOfLoss"]):
            try:
                years[i] = int(float(tokens[i]))
            except ValueError:
                pass
    if "dateOfLoss" in table.columns:
        dates = table.columns["dateOfLoss"]
        fill = (years < 0) & ~table.mask["dateOfLoss"]
        years[fill] = dates[fill].astype("datetime64[Y]").astype(int) + 1970
    return years


def missing_profile(table: ClaimTable) -> dict:
    """
    Missing rate per field plus the per-record missing-field count statistics.

    Returns:
        dict: {"rows", "per_field": {name: rate}, "mean_missing_per_record",
        "std_missing_per_record"}.
    """
    names = table.field_names
    if table.n == 0:
        return {
            "rows": 0,
            "per_field": {name: 0.0 for name in names},
            "mean_missing_per_record": 0.0,
            "std_missing_per_record": 0.0,
        }
    stacked = np.column_stack([table.mask[name] for name in names]) if names else np.zeros((table.n, 0))
    per_record = stacked.sum(axis=1)
    return {
        "rows": table.n,
        "per_field": {name: float(table.mask[name].mean()) for name in names},
        "mean_missing_per_record": float(per_record.mean()),
        "std_missing_per_record": float(per_record.std(ddof=1)) if table.n > 1 else 0.0,
    }
