from dataclasses import dataclass
from typing import TextIO, Tuple

import numpy as np
import pandas as pd

from utils import load_config, setup_logger, section
from scripts.errors import RainDataError
from scripts.claims.table import ClaimTable

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

_settings = section(config, "rainfall")
DEFAULT_SCHEME = _settings.get("scheme", "sum3")
DEFAULT_HALF_WIDTH = float(_settings.get("box_half_width", 0.05))
DEFAULT_REDUCTION = _settings.get("spatial_reduction", "mean")

RAIN_COLUMN = "rain"
ALL_SCHEMES = ("sum3", "sum5", "sum7", "max3", "max5", "max7")
_EDGE_TOLERANCE = 1e-9
_GRID_COLUMNS = ["lat", "lon", "date", "prcp_mm"]


@dataclass(frozen=True)
class AggScheme:
    """Temporal aggregation: sum or max over the event day and the days before it."""

    kind: str = "sum"
    window: int = 3

    def __post_init__(self):
        if self.kind not in ("sum", "max"):
            raise ValueError(f"aggregation kind must be 'sum' or 'max', got '{self.kind}'")
        if self.window not in (3, 5, 7):
            raise ValueError(f"aggregation window must be 3, 5 or 7 days, got {self.window}")

    @property
    def name(self) -> str:
        return f"{self.kind}{self.window}"

    @classmethod
    def from_token(cls, token: str) -> "AggScheme":
        token = token.strip().lower()
        if len(token) < 4 or not token[-1].isdigit():
            raise ValueError(f"unknown aggregation scheme '{token}'")
        return cls(kind=token[:-1], window=int(token[-1]))


class RainGrid:
    """
    Daily precipitation on a regular grid, indexed in memory.

    Absent (cell, date) pairs stay NaN in the index and are reported when
    queried, never read as zero.
    """

    def __init__(self, frame: pd.DataFrame):
        absent = [name for name in _GRID_COLUMNS if name not in frame.columns]
        if absent:
            raise RainDataError(f"rain grid lacks columns {absent}")
        frame = frame[_GRID_COLUMNS].copy()
        try:
            for name in ("lat", "lon", "prcp_mm"):
                frame[name] = frame[name].astype(float)
            dates = pd.to_datetime(frame["date"], format="%Y-%m-%d").to_numpy().astype("datetime64[D]")
        except (TypeError, ValueError) as e:
            raise RainDataError(f"rain grid has malformed cells: {e}") from e
        if frame.empty:
            raise RainDataError("rain grid is empty")
        if (frame["prcp_mm"] < 0).any() or not np.isfinite(frame["prcp_mm"]).all():
            raise RainDataError("precipitation must be finite and non-negative")

        cells = frame[["lat", "lon"]].drop_duplicates().sort_values(["lat", "lon"])
        self.cell_lat = cells["lat"].to_numpy()
        self.cell_lon = cells["lon"].to_numpy()
        cell_index = {pair: i for i, pair in enumerate(zip(self.cell_lat, self.cell_lon))}

        self.start = dates.min()
        self.end = dates.max()
        days = int((self.end - self.start).astype(int)) + 1
        self.values = np.full((days, len(cell_index)), np.nan)
        day_pos = (dates - self.start).astype(int)
        cell_pos = np.array([cell_index[pair] for pair in zip(frame["lat"], frame["lon"])])
        self.values[day_pos, cell_pos] = frame["prcp_mm"].to_numpy()

    @property
    def resolution(self) -> Tuple[float, float]:
        """Median spacing between distinct cell latitudes and longitudes (degrees)."""
        lat_steps = np.diff(np.unique(self.cell_lat))
        lon_steps = np.diff(np.unique(self.cell_lon))
        return (
            float(np.median(lat_steps)) if lat_steps.size else 0.0,
            float(np.median(lon_steps)) if lon_steps.size else 0.0,
        )

    @property
    def coverage(self) -> Tuple[np.datetime64, np.datetime64]:
        return self.start, self.end

    def cells_in_box(self, lat: float, lon: float, half_width: float) -> np.ndarray:
        inside = (np.abs(self.cell_lat - lat) <= half_width + _EDGE_TOLERANCE) & (
            np.abs(self.cell_lon - lon) <= half_width + _EDGE_TOLERANCE
        )
        return np.flatnonzero(inside)


def parse_rain_grid(stream: TextIO) -> RainGrid:
    """Reads (lat, lon, date, prcp_mm) rows, sorted or not; the header row is optional."""
    try:
        frame = pd.read_csv(stream, header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise RainDataError("rain grid is empty") from e
    if frame.shape[1] < len(_GRID_COLUMNS):
        raise RainDataError(f"rain grid rows need {len(_GRID_COLUMNS)} columns, got {frame.shape[1]}")
    first = frame.iloc[0, 0] if len(frame) else ""
    try:
        float(first)
    except ValueError:
        frame = frame.iloc[1:]
    frame = frame.iloc[:, :4]
    frame.columns = _GRID_COLUMNS
    return RainGrid(frame)


def read_rain_grid(path) -> RainGrid:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return parse_rain_grid(f)


def aggregate_rain(
    grid: RainGrid,
    lat: float,
    lon: float,
    date,
    scheme: AggScheme = AggScheme(),
    half_width: float = DEFAULT_HALF_WIDTH,
    reduction: str = DEFAULT_REDUCTION,
) -> float:
    """
    Rain in mm around a claim: spatial reduction over the box, then sum/max over the window.

    The window covers the event day and the `scheme.window - 1` days before it.

    Raises:
        RainDataError: If the box holds no cell, the window leaves the grid's
            coverage, or a queried (cell, date) is absent.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"spatial reduction must be 'mean' or 'sum', got '{reduction}'")
    cells = grid.cells_in_box(lat, lon, half_width)
    if cells.size == 0:
        raise RainDataError(
            f"no grid cell in box lat [{lat - half_width:.4f}, {lat + half_width:.4f}] "
            f"lon [{lon - half_width:.4f}, {lon + half_width:.4f}]"
        )
    day = np.datetime64(date, "D")
    first = day - np.timedelta64(scheme.window - 1, "D")
    if first < grid.start or day > grid.end:
        raise RainDataError(
            f"window {first}..{day} is outside grid coverage {grid.start}..{grid.end}"
        )
    offset = int((first - grid.start).astype(int))
    block = grid.values[offset:offset + scheme.window, cells]
    if np.isnan(block).any():
        day_idx, cell_idx = np.argwhere(np.isnan(block))[0]
        raise RainDataError(
            f"grid value absent at cell ({grid.cell_lat[cells[cell_idx]]}, "
            f"{grid.cell_lon[cells[cell_idx]]}) on {first + np.timedelta64(int(day_idx), 'D')}"
        )
    daily = block.mean(axis=1) if reduction == "mean" else block.sum(axis=1)
    return float(daily.sum() if scheme.kind == "sum" else daily.max())


def attach_rain(
    table: ClaimTable,
    grid: RainGrid,
    scheme: AggScheme = AggScheme(),
    half_width: float = DEFAULT_HALF_WIDTH,
    reduction: str = DEFAULT_REDUCTION,
) -> ClaimTable:
    """Appends the continuous `rain` column; rows the grid cannot answer get a missing cell."""
    values = np.full(table.n, np.nan)
    missing = np.ones(table.n, dtype=bool)
    located = ("latitude", "longitude", "dateOfLoss")
    if any(name not in table.columns for name in located):
        logger.warning("Claims lack latitude, longitude or dateOfLoss; rain is missing for every row")
        return table.with_column(RAIN_COLUMN, "continuous", values, missing)
    usable = ~(table.mask["latitude"] | table.mask["longitude"] | table.mask["dateOfLoss"])
    failures = 0
    for row in np.flatnonzero(usable):
        try:
            values[row] = aggregate_rain(
                grid,
                float(table.columns["latitude"][row]),
                float(table.columns["longitude"][row]),
                table.columns["dateOfLoss"][row],
                scheme,
                half_width,
                reduction,
            )
            missing[row] = False
        except RainDataError as e:
            failures += 1
            logger.debug("Row %d has no rain value: %s", row, e)
    if failures:
        logger.warning("Rain could not be aggregated for %d of %d claims", failures, table.n)
    logger.info("Attached %s rain to %d claims", scheme.name, int((~missing).sum()))
    return table.with_column(RAIN_COLUMN, "continuous", values, missing)
