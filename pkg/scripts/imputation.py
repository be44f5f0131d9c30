import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import multivariate_normal

from utils import load_config, setup_logger, section
from scripts.errors import ImputationError
from scripts.claims.table import ClaimTable, MISSING_TOKEN

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

_settings = section(config, "imputation")
DEFAULT_MAX_ITER = int(_settings.get("max_iter", 100))
DEFAULT_TOL = float(_settings.get("tol", 1e-6))
DEFAULT_GROUP_FIELD = _settings.get("group_field", "countyCode")

PSD_TOLERANCE = 1e-8
RIDGE_FACTOR = 1e-6


@dataclass(frozen=True)
class GaussianParams:
    """Multivariate Gaussian fitted by EM, with the observed-data log-likelihood per iteration."""

    mean: np.ndarray
    cov: np.ndarray
    iterations: int
    converged: bool
    names: tuple = ()
    loglik_trace: tuple = ()

    def __post_init__(self):
        m = len(self.mean)
        if self.cov.shape != (m, m):
            raise ValueError(f"covariance must be {m}x{m}, got {self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12, rtol=1e-10):
            raise ValueError("covariance must be symmetric")
        if m and np.linalg.eigvalsh(self.cov).min() < -PSD_TOLERANCE * max(1.0, np.abs(self.cov).max()):
            raise ValueError("covariance must be positive semidefinite")
        if self.names and len(self.names) != m:
            raise ValueError("names must match the mean dimension")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def write(self, mean_path: Path, cov_path: Path) -> None:
        """Audit dump: mean vector and covariance matrix as comma-separated text."""
        names = list(self.names) or [f"x{i}" for i in range(self.dim)]
        pd.DataFrame([self.mean], columns=names).to_csv(
            mean_path, index=False, float_format="%.17g", lineterminator="\n"
        )
        pd.DataFrame(self.cov, columns=names).to_csv(
            cov_path, index=False, float_format="%.17g", lineterminator="\n"
        )

    @classmethod
    def read(cls, mean_path: Path, cov_path: Path) -> "GaussianParams":
        mean_frame = pd.read_csv(mean_path)
        cov_frame = pd.read_csv(cov_path)
        return cls(
            mean=mean_frame.to_numpy(dtype=float)[0],
            cov=cov_frame.to_numpy(dtype=float),
            iterations=0,
            converged=True,
            names=tuple(mean_frame.columns),
        )


def _check_matrix(x: np.ndarray, mask: np.ndarray):
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != x.shape:
        raise ValueError(f"data {x.shape} and mask {mask.shape} must be matching 2-D arrays")
    return x, mask


def observed_loglik(x: np.ndarray, mask: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log-likelihood of the observed entries under N(mean, cov), marginalising missing ones."""
    x, mask = _check_matrix(x, mask)
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    total = 0.0
    for k, pattern in enumerate(patterns):
        obs = ~pattern
        if not obs.any():
            continue
        rows = x[inverse.ravel() == k][:, obs]
        logpdf = multivariate_normal.logpdf(
            rows, mean=mean[obs], cov=cov[np.ix_(obs, obs)], allow_singular=True
        )
        total += float(np.sum(np.atleast_1d(logpdf)))
    return total


def _conditional(x_obs: np.ndarray, mean: np.ndarray, cov: np.ndarray, obs: np.ndarray, ridge: float):
    """Conditional mean of the missing block and its covariance given the observed block."""
    mis = ~obs
    s_oo = cov[np.ix_(obs, obs)] + ridge * np.eye(int(obs.sum()))
    s_mo = cov[np.ix_(mis, obs)]
    gain = np.linalg.solve(s_oo, s_mo.T).T
    cond_mean = mean[mis] + (x_obs - mean[obs]) @ gain.T
    cond_cov = cov[np.ix_(mis, mis)] - gain @ s_mo.T
    return cond_mean, cond_cov


def _ridge(cov: np.ndarray) -> float:
    m = cov.shape[0]
    return RIDGE_FACTOR * float(np.trace(cov)) / m if m else 0.0


def em_fit(
    x: np.ndarray,
    mask: np.ndarray,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    names: Optional[Sequence[str]] = None,
) -> GaussianParams:
    """
    Maximum-likelihood mean and covariance of incomplete Gaussian data by EM.

    Stops when the max-abs parameter change falls below tol relative to the
    parameter scale, or after max_iter iterations.

    Args:
        x (np.ndarray): n x m data; values under the mask are ignored.
        mask (np.ndarray): n x m booleans, True where missing.
        max_iter (int): Iteration cap.
        tol (float): Relative convergence tolerance.
        names (Optional[Sequence[str]]): Column names used in error messages.

    Returns:
        GaussianParams: Fitted parameters with the log-likelihood trace.

    Raises:
        ImputationError: If a column has fewer than two observed values.
    """
    x, mask = _check_matrix(x, mask)
    n, m = x.shape
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(m))
    observed_counts = (~mask).sum(axis=0)
    for j in np.flatnonzero(observed_counts < 2):
        state = "fully missing" if observed_counts[j] == 0 else "observed fewer than twice"
        raise ImputationError(f"column '{names[j]}' is {state}")

    filled = np.where(mask, np.nan, x)
    mean = np.nanmean(filled, axis=0)
    if not mask.any():
        centered = x - mean
        cov = centered.T @ centered / n
        loglik = observed_loglik(x, mask, mean, cov)
        return GaussianParams(mean, (cov + cov.T) / 2, 1, True, names, (loglik,))

    cov = np.diag(np.maximum(np.nanvar(filled, axis=0), 1e-12))
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    trace: List[float] = []
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        trace.append(observed_loglik(x, mask, mean, cov))
        ridge = _ridge(cov)
        t1 = np.zeros(m)
        t2 = np.zeros((m, m))
        for k, pattern in enumerate(patterns):
            rows = x[inverse == k]
            obs = ~pattern
            count = len(rows)
            if not pattern.any():
                completed = rows
            elif not obs.any():
                t1 += count * mean
                t2 += count * (cov + np.outer(mean, mean))
                continue
            else:
                cond_mean, cond_cov = _conditional(rows[:, obs], mean, cov, obs, ridge)
                completed = rows.copy()
                completed[:, pattern] = cond_mean
                t2[np.ix_(pattern, pattern)] += count * cond_cov
            t1 += completed.sum(axis=0)
            t2 += completed.T @ completed

        new_mean = t1 / n
        new_cov = t2 / n - np.outer(new_mean, new_mean)
        new_cov = (new_cov + new_cov.T) / 2
        change = max(np.abs(new_mean - mean).max(), np.abs(new_cov - cov).max())
        scale = max(1.0, np.abs(new_mean).max(), np.abs(new_cov).max())
        mean, cov = new_mean, new_cov
        logger.debug("EM iteration %d: max parameter change %.3e", iteration, change)
        if change <= tol * scale:
            converged = True
            break

    trace.append(observed_loglik(x, mask, mean, cov))
    if not converged:
        logger.warning("EM did not converge within %d iterations", max_iter)
    # clip round-off negatives so the PSD invariant holds
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() < 0:
        cov = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
        cov = (cov + cov.T) / 2
    return GaussianParams(mean, cov, iteration, converged, names, tuple(trace))


def em_impute(x: np.ndarray, mask: np.ndarray, params: GaussianParams) -> np.ndarray:
    """Replaces missing entries with their conditional means; observed entries are untouched."""
    x, mask = _check_matrix(x, mask)
    if x.shape[1] != params.dim:
        raise ValueError(f"data has {x.shape[1]} columns, params have {params.dim}")
    out = x.copy()
    if not mask.any():
        return out
    ridge = _ridge(params.cov)
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for k, pattern in enumerate(patterns):
        if not pattern.any():
            continue
        rows = np.flatnonzero(inverse == k)
        obs = ~pattern
        if not obs.any():
            out[np.ix_(rows, pattern)] = params.mean
            continue
        cond_mean, _ = _conditional(x[np.ix_(rows, obs)], params.mean, params.cov, obs, ridge)
        out[np.ix_(rows, pattern)] = cond_mean
    return out


def impute_categorical(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Puts the reserved missing level in every masked cell."""
    values = np.asarray(values, dtype=object)
    mask = np.asarray(mask, dtype=bool)
    if np.any(values[~mask] == MISSING_TOKEN):
        raise ImputationError(f"data already contains the reserved level '{MISSING_TOKEN}'")
    out = values.copy()
    out[mask] = MISSING_TOKEN
    return out


def _lower_median(values: Sequence[int]) -> int:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def date_fill_value(values: np.ndarray, mask: np.ndarray) -> np.datetime64:
    """
    Date rebuilt from the median year and median day-of-year of the observed dates.

    Even counts take the lower middle element; the day is clamped to the
    rebuilt year's length.
    """
    observed = [day.astype(dt.date) for day in np.asarray(values)[~np.asarray(mask, dtype=bool)]]
    if not observed:
        raise ImputationError("cannot impute dates without any observed date")
    year = _lower_median([day.year for day in observed])
    day_of_year = _lower_median([day.timetuple().tm_yday for day in observed])
    year_length = 366 if (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)) else 365
    day_of_year = min(day_of_year, year_length)
    return np.datetime64(dt.date(year, 1, 1) + dt.timedelta(days=day_of_year - 1), "D")


def impute_dates(
    values: np.ndarray, mask: np.ndarray, fill: Optional[np.datetime64] = None
) -> np.ndarray:
    """Fills masked dates with `fill`, or with the median date of the observed cells."""
    values = np.asarray(values, dtype="datetime64[D]")
    mask = np.asarray(mask, dtype=bool)
    if fill is None:
        fill = date_fill_value(values, mask)
    out = values.copy()
    out[mask] = fill
    return out


class TableImputer:
    """
    Fits imputation state on training rows and applies it to any rows.

    Continuous predictors get one EM model per county slice (falling back to
    a model over all training rows for unseen or too-small slices); the
    response never enters the EM model.
    """

    def __init__(
        self,
        max_iter: int = DEFAULT_MAX_ITER,
        tol: float = DEFAULT_TOL,
        group_field: Optional[str] = DEFAULT_GROUP_FIELD,
    ):
        self.config = load_config()
        self.logger = setup_logger(self.__class__.__name__, self.config)
        self.max_iter = max_iter
        self.tol = tol
        self.group_field = group_field
        self.continuous: List[str] = []
        self.constant_fill: Dict[str, float] = {}
        self.global_params: Optional[GaussianParams] = None
        self.group_params: Dict[str, GaussianParams] = {}
        self.date_fill: Dict[str, np.datetime64] = {}

    def _groups(self, table: ClaimTable) -> np.ndarray:
        if self.group_field and self.group_field in table.columns:
            tokens = table.columns[self.group_field].copy()
            tokens[table.mask[self.group_field]] = ""
            return tokens
        return np.full(table.n, "", dtype=object)

    def fit(self, table: ClaimTable) -> "TableImputer":
        if table.n == 0:
            raise ImputationError("cannot fit imputation on an empty table")
        candidates = table.names_of_kind("continuous")
        self.continuous = []
        self.constant_fill = {}
        for name in candidates:
            if (~table.mask[name]).sum() >= 2:
                self.continuous.append(name)
            else:
                self.constant_fill[name] = 0.0
                self.logger.warning("Column '%s' has fewer than 2 observed training values; filling with 0", name)

        if self.continuous:
            x = np.column_stack([table.columns[name] for name in self.continuous])
            mask = np.column_stack([table.mask[name] for name in self.continuous])
            self.global_params = em_fit(x, mask, self.max_iter, self.tol, self.continuous)
            groups = self._groups(table)
            for group in sorted(set(groups) - {""}):
                rows = groups == group
                try:
                    self.group_params[group] = em_fit(
                        x[rows], mask[rows], self.max_iter, self.tol, self.continuous
                    )
                except ImputationError as e:
                    self.logger.info("County slice '%s' uses the pooled EM model: %s", group, e)

        for name in table.names_of_kind("date"):
            if (~table.mask[name]).any():
                self.date_fill[name] = date_fill_value(table.columns[name], table.mask[name])
        self.logger.info(
            "Fitted imputation: %d continuous fields, %d county slices",
            len(self.continuous),
            len(self.group_params),
        )
        return self

    def transform(self, table: ClaimTable) -> ClaimTable:
        out = table
        if self.continuous and table.n:
            x = np.column_stack([table.columns[name] for name in self.continuous])
            mask = np.column_stack([table.mask[name] for name in self.continuous])
            completed = x.copy()
            groups = self._groups(table)
            for group in sorted(set(groups)):
                rows = groups == group
                params = self.group_params.get(group, self.global_params)
                completed[rows] = em_impute(x[rows], mask[rows], params)
            for j, name in enumerate(self.continuous):
                out = out.with_column(name, "continuous", completed[:, j], np.zeros(table.n, dtype=bool))
        for name, value in self.constant_fill.items():
            if name in table.columns:
                filled = np.where(table.mask[name], value, table.columns[name])
                out = out.with_column(name, "continuous", filled, np.zeros(table.n, dtype=bool))

        for name in table.names_of_kind("categorical"):
            out = out.with_column(
                name,
                "categorical",
                impute_categorical(table.columns[name], table.mask[name]),
                np.zeros(table.n, dtype=bool),
            )
        for name in table.names_of_kind("date"):
            if name not in self.date_fill:
                continue
            out = out.with_column(
                name,
                "date",
                impute_dates(table.columns[name], table.mask[name], self.date_fill[name]),
                np.zeros(table.n, dtype=bool),
            )
        return out
