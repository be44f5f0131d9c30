from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist
from sklearn.model_selection import KFold

from utils import load_config, setup_logger, section
from scripts.errors import RegressorError
from scripts.features import FeatureMatrix
from scripts.seeding import derive_seed

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

_settings = section(config, "gp")
DEFAULT_CANDIDATES = int(_settings.get("candidates", 20))
DEFAULT_FOLDS = int(_settings.get("folds", 5))
DEFAULT_MAX_ROWS = int(_settings.get("max_rows", 20000))
DEFAULT_BASES = tuple(_settings.get("bases", ["constant", "linear", "quadratic"]))
KERNEL = _settings.get("kernel", "squared_exponential")

BASES = ("constant", "linear", "quadratic")
KERNELS = ("squared_exponential",)
FORMAT_VERSION = "gp-model v1"
JITTER_START = 1e-10
JITTER_MAX = 1e-4
MIN_NOISE = 1e-4
# candidates whose CV RMSE is within this relative band count as tied
_TIE_BAND = 1e-6


def basis_matrix(x: np.ndarray, kind: str) -> np.ndarray:
    """Mean basis: constant [1], linear [1, x], or pure quadratic [1, x, x**2]."""
    ones = np.ones((x.shape[0], 1))
    if kind == "constant":
        return ones
    if kind == "linear":
        return np.hstack([ones, x])
    if kind == "quadratic":
        return np.hstack([ones, x, x**2])
    raise ValueError(f"unknown basis '{kind}', expected one of {BASES}")


def kernel_matrix(a: np.ndarray, b: np.ndarray, length_scale: float, kind: str = KERNEL) -> np.ndarray:
    """k(a, b) = exp(-|a - b|^2 / (2 l^2))."""
    if kind not in KERNELS:
        raise ValueError(f"unsupported kernel '{kind}', expected one of {KERNELS}")
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * length_scale**2))


@dataclass(frozen=True)
class GPConfig:
    basis: str
    length_scale: float
    noise: float  # standard deviation sigma
    standardize: bool
    kernel: str = KERNEL

    def __post_init__(self):
        if self.basis not in BASES:
            raise ValueError(f"unknown basis '{self.basis}'")
        if self.kernel not in KERNELS:
            raise ValueError(f"unsupported kernel '{self.kernel}'")
        if not self.length_scale > 0 or not self.noise > 0:
            raise ValueError("length scale and noise must be > 0")

    def to_dict(self) -> dict:
        return {
            "basis": self.basis,
            "length_scale": self.length_scale,
            "noise": self.noise,
            "standardize": self.standardize,
            "kernel": self.kernel,
        }


@dataclass(frozen=True)
class GPModel:
    """Fitted GP: A = K[X,X] + (sigma^2 / sigma_p^2) I is held as its Cholesky factor."""

    config: GPConfig
    feature_names: Tuple[str, ...]
    x_train: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    coefficients: np.ndarray
    prior_var: float
    residuals: np.ndarray
    factor: Tuple[np.ndarray, bool]
    weights: np.ndarray  # A^-1 residuals
    jitter: float = 0.0
    cv_rmse: float = float("nan")
    search_log: Tuple[Tuple[GPConfig, float], ...] = field(default=())

    def __post_init__(self):
        if not self.prior_var > 0:
            raise ValueError("prior variance must be > 0")
        if self.factor[0].shape[0] != self.x_train.shape[0]:
            raise ValueError("factorization does not match the stored training inputs")

    @property
    def noise_var(self) -> float:
        return self.config.noise**2

    def to_text(self) -> str:
        """Model report: kernel parameters and basis coefficients."""
        lines = [
            FORMAT_VERSION,
            f"kernel {self.config.kernel}",
            f"length_scale {self.config.length_scale!r}",
            f"noise_var {self.noise_var!r}",
            f"prior_var {self.prior_var!r}",
            f"basis {self.config.basis}",
            f"standardize {int(self.config.standardize)}",
            f"jitter {self.jitter!r}",
            f"cv_rmse {self.cv_rmse!r}",
            f"n_train {self.x_train.shape[0]}",
            "features " + "\t".join(self.feature_names),
            "coefficients " + " ".join(repr(float(c)) for c in self.coefficients),
        ]
        return "\n".join(lines) + "\n"


def _factorize(a: np.ndarray) -> Tuple[Tuple[np.ndarray, bool], float]:
    """Cholesky factor of a, adding diagonal jitter from 1e-10 up to 1e-4 on failure."""
    jitter = 0.0
    while True:
        try:
            return cho_factor(a + jitter * np.eye(a.shape[0]), lower=True), jitter
        except LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise RegressorError("kernel system is singular after jitter escalation")
            logger.debug("Cholesky failed; retrying with jitter %.1e", jitter)


def input_scaling(x: np.ndarray, standardize: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Column means and scales the kernel sees; identity when standardize is off."""
    if not standardize:
        return np.zeros(x.shape[1]), np.ones(x.shape[1])
    x_scale = x.std(axis=0)
    return x.mean(axis=0), np.where(x_scale > 0, x_scale, 1.0)


def gp_fit_config(
    x: np.ndarray, y: np.ndarray, gp_config: GPConfig, names: Optional[Sequence[str]] = None
) -> GPModel:
    """Fits a GP with fixed hyperparameters (no search)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] == 0:
        raise RegressorError("GP training set is empty")
    if not np.all(np.isfinite(y)):
        raise RegressorError("GP training response contains non-finite values")
    x_mean, x_scale = input_scaling(x, gp_config.standardize)
    xs = (x - x_mean) / x_scale

    coefficients = np.linalg.lstsq(basis_matrix(xs, gp_config.basis), y, rcond=None)[0]
    residuals = y - basis_matrix(xs, gp_config.basis) @ coefficients
    prior_var = max(float(np.var(residuals)), 1e-12)

    a = kernel_matrix(xs, xs, gp_config.length_scale, gp_config.kernel)
    a[np.diag_indices_from(a)] += gp_config.noise**2 / prior_var
    factor, jitter = _factorize(a)
    weights = cho_solve(factor, residuals)
    return GPModel(
        config=gp_config,
        feature_names=tuple(names) if names is not None else tuple(f"x{j}" for j in range(x.shape[1])),
        x_train=xs,
        x_mean=x_mean,
        x_scale=x_scale,
        coefficients=coefficients,
        prior_var=prior_var,
        residuals=residuals,
        factor=factor,
        weights=weights,
        jitter=jitter,
    )


def gp_predict(model: GPModel, x: Union[FeatureMatrix, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior mean and variance at new rows.

    mean = basis(x*) + K[x*,X] A^-1 r
    var  = sigma_p^2 k(x*,x*) - sigma_p^2 K[x*,X] A^-1 K[X,x*] + sigma^2
    """
    if isinstance(x, FeatureMatrix):
        if tuple(x.names) != model.feature_names:
            raise RegressorError("prediction columns do not match the training columns")
        x = x.values
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.x_train.shape[1]:
        raise RegressorError(f"expected {model.x_train.shape[1]} columns, got shape {x.shape}")
    xs = (x - model.x_mean) / model.x_scale
    cross = kernel_matrix(xs, model.x_train, model.config.length_scale, model.config.kernel)
    mean = basis_matrix(xs, model.config.basis) @ model.coefficients + cross @ model.weights
    reduction = np.sum(cross * cho_solve(model.factor, cross.T).T, axis=1)
    variance = model.prior_var * (1.0 - reduction) + model.noise_var
    # sigma_p^2 (k** - reduction) is non-negative; rounding must not push below the noise floor
    return mean, np.maximum(variance, model.noise_var)


def _cv_score(x: np.ndarray, y: np.ndarray, gp_config: GPConfig, folds: int, seed: int) -> float:
    errors = []
    for train, test in KFold(n_splits=folds, shuffle=True, random_state=seed).split(x):
        try:
            model = gp_fit_config(x[train], y[train], gp_config)
        except RegressorError:
            return float("inf")
        mean, _ = gp_predict(model, x[test])
        errors.append(np.sqrt(np.mean((mean - y[test]) ** 2)))
    return float(np.mean(errors))


def search_candidates(
    x: np.ndarray,
    y: np.ndarray,
    n_candidates: int,
    seed: int,
    bases: Sequence[str] = DEFAULT_BASES,
) -> List[GPConfig]:
    """
    Candidate grid: bases and standardize on/off cycle deterministically while
    length scale and noise are drawn log-uniformly from r*(1e-3, 1) and
    (1e-4, max(1e-3, 10*sigma_y)), r being the largest predictor range on the
    inputs the candidate fits (standardized or raw).
    """
    x = np.asarray(x, dtype=float)
    spreads = {True: 1.0, False: 1.0}
    if x.size:
        for standardize in spreads:
            mean, scale = input_scaling(x, standardize)
            spread = float(np.max(np.ptp((x - mean) / scale, axis=0)))
            spreads[standardize] = spread if spread > 0 else 1.0
    noise_high = max(1e-3, 10.0 * float(np.std(y)))
    rng = np.random.default_rng(seed)
    candidates = []
    for i in range(n_candidates):
        standardize = (i // len(bases)) % 2 == 0
        candidates.append(
            GPConfig(
                basis=bases[i % len(bases)],
                length_scale=spreads[standardize] * 10 ** rng.uniform(-3.0, 0.0),
                noise=float(np.exp(rng.uniform(np.log(MIN_NOISE), np.log(noise_high)))),
                standardize=standardize,
            )
        )
    return candidates


def _select(log: List[Tuple[GPConfig, float]]) -> int:
    """Lowest CV RMSE; near-ties go to the simpler basis, then the earlier candidate."""
    scores = np.array([score for _, score in log])
    best = float(np.min(scores))
    band = best + _TIE_BAND * abs(best) + 1e-12
    tied = [i for i, score in enumerate(scores) if score <= band]
    return min(tied, key=lambda i: (BASES.index(log[i][0].basis), i))


def gp_fit(
    x: Union[FeatureMatrix, np.ndarray],
    y: Optional[np.ndarray] = None,
    folds: int = DEFAULT_FOLDS,
    candidates: int = DEFAULT_CANDIDATES,
    seed: int = 0,
    max_rows: int = DEFAULT_MAX_ROWS,
    bases: Sequence[str] = DEFAULT_BASES,
    n_jobs: int = 1,
) -> GPModel:
    """
    Cross-validated hyperparameter search, then a refit on all training rows.

    Args:
        x: Training rows (FeatureMatrix, or a 2-D array with `y`).
        y: Response when `x` is a plain array.
        folds (int): K in K-fold cross-validation.
        candidates (int): Number of search candidates.
        seed (int): Seed for subsampling, candidate draws and fold layout.
        max_rows (int): Larger training sets are subsampled to this size.
        bases (Sequence[str]): Mean bases in the search space.
        n_jobs (int): joblib worker count over candidates.

    Returns:
        GPModel: Refitted model carrying the CV score and search log.

    Raises:
        RegressorError: If folds < 2, n < folds, or the best system stays singular.
    """
    if isinstance(x, FeatureMatrix):
        names = tuple(x.names)
        values, target = x.values, (x.y if y is None else np.asarray(y, dtype=float))
    else:
        values = np.asarray(x, dtype=float)
        target = np.asarray(y, dtype=float)
        names = tuple(f"x{j}" for j in range(values.shape[1]))
    n = values.shape[0]
    if folds < 2:
        raise RegressorError(f"cross-validation needs at least 2 folds, got {folds}")
    if n < folds:
        raise RegressorError(f"GP search needs at least {folds} rows, got {n}")
    if n > max_rows:
        keep = np.sort(np.random.default_rng(derive_seed(seed, "gp-subsample")).choice(n, max_rows, replace=False))
        logger.warning("GP training set has %d rows; subsampling to %d", n, max_rows)
        values, target = values[keep], target[keep]

    configs = search_candidates(values, target, candidates, derive_seed(seed, "gp-candidates"), bases)
    fold_seed = derive_seed(seed, "gp-folds")
    scores = Parallel(n_jobs=n_jobs)(
        delayed(_cv_score)(values, target, candidate, folds, fold_seed) for candidate in configs
    )
    log = list(zip(configs, (float(s) for s in scores)))
    if not np.isfinite(min(score for _, score in log)):
        raise RegressorError("every GP candidate failed to factorize")
    best = _select(log)
    logger.info(
        "GP search: %d candidates, best CV RMSE %.6g (%s)", len(log), log[best][1], log[best][0].to_dict()
    )
    model = gp_fit_config(values, target, log[best][0], names)
    return replace(model, cv_rmse=log[best][1], search_log=tuple(log))
