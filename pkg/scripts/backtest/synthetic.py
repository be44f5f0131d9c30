import io
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from utils import load_config, setup_logger
from scripts.claims.schema import SchemaRegistry, load_schema
from scripts.claims.table import ClaimTable, parse_claims
from scripts.rainfall import RainGrid

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

SYNTHETIC_FIPS = "99001"
EVENTS_PER_YEAR = 3
GRID_STEP = 0.1
LAT_RANGE = (29.5, 30.0)
LON_RANGE = (-95.5, -95.0)
# multiplicative loss noise
NOISE_LAW = dict(c=2.0, d=3.0, scale=1.0)
LOSS_SCALE = 2.0e4


@dataclass(frozen=True)
class SyntheticCounty:
    table: ClaimTable
    grid: Optional[RainGrid]
    event_days: Tuple[np.datetime64, ...]


def _event_days(rng: np.random.Generator, first_year: int, last_year: int) -> np.ndarray:
    days = []
    for year in range(first_year, last_year + 1):
        start = np.datetime64(f"{year}-06-01")
        offsets = np.sort(rng.choice(120, EVENTS_PER_YEAR, replace=False))
        days.extend(start + np.timedelta64(int(o), "D") for o in offsets)
    return np.array(days, dtype="datetime64[D]")


def _rain_frame(rng: np.random.Generator, event_days: np.ndarray, window: int = 7) -> pd.DataFrame:
    """Gridded rain for the `window` days ending on each event day; storms centre randomly in the box."""
    lats = np.round(np.arange(LAT_RANGE[0], LAT_RANGE[1] + 1e-9, GRID_STEP), 4)
    lons = np.round(np.arange(LON_RANGE[0], LON_RANGE[1] + 1e-9, GRID_STEP), 4)
    cell_lat, cell_lon = (a.ravel() for a in np.meshgrid(lats, lons, indexing="ij"))
    rows = []
    for day in event_days:
        centre_lat = rng.uniform(*LAT_RANGE)
        centre_lon = rng.uniform(*LON_RANGE)
        peak = rng.gamma(shape=3.0, scale=40.0)
        spread = np.exp(-((cell_lat - centre_lat) ** 2 + (cell_lon - centre_lon) ** 2) / (2 * 0.15**2))
        for back in range(window):
            fade = np.exp(-back / 2.0)
            prcp = np.round(peak * fade * spread + rng.exponential(1.0, cell_lat.size), 3)
            date = str(day - np.timedelta64(back, "D"))
            rows.append(pd.DataFrame({"lat": cell_lat, "lon": cell_lon, "date": date, "prcp_mm": prcp}))
    frame = pd.concat(rows, ignore_index=True)
    return frame.drop_duplicates(subset=["lat", "lon", "date"], keep="first")


def _blank(values: np.ndarray, rng: np.random.Generator, rate: float) -> np.ndarray:
    out = values.astype(object)
    out[rng.random(out.size) < rate] = ""
    return out


def synthetic_county(
    n: int = 3000,
    seed: int = 0,
    first_year: int = 2000,
    last_year: int = 2020,
    with_rain: bool = False,
    missing_rate: float = 0.1,
    schema: Optional[SchemaRegistry] = None,
    fips: str = SYNTHETIC_FIPS,
) -> SyntheticCounty:
    """
    A county with a known loss law, for running the whole pipeline without external data.

    Losses are LOSS_SCALE * exp(f(x)) * B with B ~ Burr(c=2, k=3, scale=1)
    and f a nonlinear function of five continuous and two categorical
    features (plus rain when enabled). Predictors get MCAR gaps at
    `missing_rate`; the response is always observed.

    Returns:
        SyntheticCounty: Parsed claims table, optional rain grid, event days.
    """
    rng = np.random.default_rng(seed)
    schema = schema or load_schema()
    event_days = _event_days(rng, first_year, last_year)
    event = rng.integers(0, event_days.size, n)
    date_of_loss = event_days[event]
    year = date_of_loss.astype("datetime64[Y]").astype(int) + 1970

    latitude = rng.uniform(*LAT_RANGE, n)
    longitude = rng.uniform(*LON_RANGE, n)
    coverage = rng.uniform(5.0e4, 2.5e5, n)
    base_flood = rng.normal(10.0, 3.0, n)
    elevation_diff = rng.normal(0.0, 3.0, n)
    lowest_floor = base_flood + elevation_diff + rng.normal(0.0, 0.5, n)
    zone = rng.choice(np.array(["AE", "X", "VE"]), n, p=[0.5, 0.35, 0.15])
    floors = rng.choice(np.array(["1", "2", "3"]), n, p=[0.5, 0.35, 0.15])
    construction_year = rng.integers(1950, 2000, n)
    construction = np.array(
        [
            np.datetime64(f"{y}-01-01") + np.timedelta64(int(d), "D")
            for y, d in zip(construction_year, rng.integers(0, 365, n))
        ],
        dtype="datetime64[D]",
    )

    f = (
        0.8 * np.tanh(-elevation_diff / 2.0)
        + 0.5 * np.sin(6.0 * (latitude - LAT_RANGE[0]) / (LAT_RANGE[1] - LAT_RANGE[0]))
        + 0.4 * (coverage / 2.5e5) ** 2
        + 0.2 * np.cos(base_flood / 3.0)
        - 0.1 * (lowest_floor - base_flood) ** 2 / 9.0
        + np.select([zone == "VE", zone == "AE"], [0.7, 0.3], 0.0)
        + np.select([floors == "1", floors == "2"], [0.3, 0.1], 0.0)
    )

    grid = None
    if with_rain:
        frame = _rain_frame(rng, event_days)
        grid = RainGrid(frame)
        cell_lat = np.round(np.clip(np.round(latitude / GRID_STEP) * GRID_STEP, *LAT_RANGE), 4)
        cell_lon = np.round(np.clip(np.round(longitude / GRID_STEP) * GRID_STEP, *LON_RANGE), 4)
        lookup = frame.set_index(["lat", "lon", "date"])["prcp_mm"]
        daily = np.array(
            [lookup.get((la, lo, str(d)), 0.0) for la, lo, d in zip(cell_lat, cell_lon, date_of_loss)]
        )
        f = f + 0.6 * np.log1p(daily / 50.0)

    noise = stats.burr12.rvs(NOISE_LAW["c"], NOISE_LAW["d"], scale=NOISE_LAW["scale"], size=n, random_state=rng)
    amount = np.round(LOSS_SCALE * np.exp(f) * noise, 2)

    columns = {
        "amountPaidOnBuildingClaim": amount.astype(str).astype(object),
        "latitude": _blank(np.round(latitude, 5).astype(str), rng, missing_rate),
        "longitude": _blank(np.round(longitude, 5).astype(str), rng, missing_rate),
        "totalBuildingInsuranceCoverage": _blank(np.round(coverage, 2).astype(str), rng, missing_rate),
        "baseFloodElevation": _blank(np.round(base_flood, 3).astype(str), rng, missing_rate),
        "elevationDifference": _blank(np.round(elevation_diff, 3).astype(str), rng, missing_rate),
        "lowestFloorElevation": _blank(np.round(lowest_floor, 3).astype(str), rng, missing_rate),
        "floodZone": _blank(zone, rng, missing_rate),
        "numberOfFloorsInTheInsuredBuilding": _blank(floors, rng, missing_rate),
        "dateOfLoss": date_of_loss.astype(str).astype(object),
        "yearOfLoss": year.astype(str).astype(object),
        "originalConstructionDate": _blank(construction.astype(str), rng, missing_rate),
        "countyCode": np.full(n, fips, dtype=object),
        "eventLabel": np.array([str(d) for d in date_of_loss], dtype=object),
    }
    buffer = io.StringIO()
    pd.DataFrame(columns).to_csv(buffer, index=False, lineterminator="\n")
    buffer.seek(0)
    table = parse_claims(buffer, schema)
    logger.info(
        "Generated synthetic county %s: %d claims over %d events%s",
        fips,
        n,
        event_days.size,
        " with rain" if with_rain else "",
    )
    return SyntheticCounty(table=table, grid=grid, event_days=tuple(event_days))
