from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import optimize, stats

from utils import load_config, setup_logger, section
from scripts.errors import FitError

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

_settings = section(config, "distributions")
DEFAULT_MIN_N = int(_settings.get("min_n", 30))
DEFAULT_MAX_ITER = int(_settings.get("max_iter", 2000))
DEFAULT_BOUNDS = tuple(float(b) for b in _settings.get("param_bounds", [1e-6, 1e6]))

BURR = "Burr"
WEIBULL = "Weibull"
ZERO_SHIFT = 1e-6  # zeros move to ZERO_SHIFT * median(positive samples)
_BAD_NLL = 1e300


@dataclass(frozen=True)
class ParametricDist:
    """
    Burr XII (shapes c, k; scale λ) or Weibull (shape k; scale λ) on (0, ∞).

    Burr:    F(y) = 1 - [1 + (y/λ)^c]^(-k)
    Weibull: F(y) = 1 - exp(-(y/λ)^k)
    """

    tag: str
    k: float
    scale: float
    c: Optional[float] = None

    def __post_init__(self):
        if self.tag not in (BURR, WEIBULL):
            raise ValueError(f"distribution tag must be '{BURR}' or '{WEIBULL}', got '{self.tag}'")
        if self.tag == BURR and self.c is None:
            raise ValueError("Burr distribution needs the shape c")
        if self.tag == WEIBULL and self.c is not None:
            raise ValueError("Weibull distribution has no shape c")
        for name, value in (("k", self.k), ("scale", self.scale), ("c", self.c)):
            if value is None:
                continue
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"parameter {name} must be finite and > 0, got {value}")

    @classmethod
    def burr(cls, c: float, k: float, scale: float) -> "ParametricDist":
        return cls(BURR, k=float(k), scale=float(scale), c=float(c))

    @classmethod
    def weibull(cls, k: float, scale: float) -> "ParametricDist":
        return cls(WEIBULL, k=float(k), scale=float(scale))

    @property
    def frozen(self):
        if self.tag == BURR:
            return stats.burr12(self.c, self.k, scale=self.scale)
        return stats.weibull_min(self.k, scale=self.scale)

    def pdf(self, y):
        return self.frozen.pdf(y)

    def logpdf(self, y):
        return self.frozen.logpdf(y)

    def cdf(self, y):
        return self.frozen.cdf(y)

    def sf(self, y):
        return self.frozen.sf(y)

    def quantile(self, u):
        return self.frozen.ppf(u)

    def isf(self, s):
        return self.frozen.isf(s)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return self.frozen.rvs(size=size, random_state=rng)

    def params(self) -> dict:
        out = {"k": self.k, "scale": self.scale}
        if self.c is not None:
            out["c"] = self.c
        return out

    def to_dict(self) -> dict:
        return {"tag": self.tag, **self.params()}

    @classmethod
    def from_dict(cls, data: dict) -> "ParametricDist":
        return cls(data["tag"], k=data["k"], scale=data["scale"], c=data.get("c"))


def _require(dist: ParametricDist, tag: str) -> None:
    if dist.tag != tag:
        raise ValueError(f"expected a {tag} distribution, got {dist.tag}")


def burr_pdf(dist: ParametricDist, y):
    _require(dist, BURR)
    return dist.pdf(y)


def burr_cdf(dist: ParametricDist, y):
    _require(dist, BURR)
    return dist.cdf(y)


def burr_quantile(dist: ParametricDist, u):
    _require(dist, BURR)
    return dist.quantile(u)


def weibull_pdf(dist: ParametricDist, y):
    _require(dist, WEIBULL)
    return dist.pdf(y)


def weibull_cdf(dist: ParametricDist, y):
    _require(dist, WEIBULL)
    return dist.cdf(y)


def weibull_quantile(dist: ParametricDist, u):
    _require(dist, WEIBULL)
    return dist.quantile(u)


@dataclass(frozen=True)
class FitReport:
    dist: ParametricDist
    fallback: bool
    loglik: float
    iterations: int
    converged: bool
    start_loglik: Optional[float] = None

    def __post_init__(self):
        if self.fallback != (self.dist.tag == WEIBULL):
            raise ValueError("fallback flag must be set exactly when a Weibull replaced the Burr fit")

    def to_line(self) -> str:
        """One text line: tag, parameters, fallback flag, log-likelihood."""
        params = " ".join(f"{name}={value!r}" for name, value in sorted(self.dist.params().items()))
        return f"{self.dist.tag} {params} fallback={int(self.fallback)} loglik={self.loglik!r}"

    @classmethod
    def from_line(cls, line: str) -> "FitReport":
        tag, *pairs = line.split()
        values = dict(pair.split("=", 1) for pair in pairs)
        dist = ParametricDist(
            tag,
            k=float(values["k"]),
            scale=float(values["scale"]),
            c=float(values["c"]) if "c" in values else None,
        )
        return cls(dist, bool(int(values["fallback"])), float(values["loglik"]), 0, True)

    def to_dict(self) -> dict:
        return {
            "dist": self.dist.to_dict(),
            "fallback": self.fallback,
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "start_loglik": self.start_loglik,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitReport":
        return cls(
            ParametricDist.from_dict(data["dist"]),
            bool(data["fallback"]),
            float(data["loglik"]),
            int(data["iterations"]),
            bool(data["converged"]),
            data.get("start_loglik"),
        )


def prepare_samples(samples, min_n: int = DEFAULT_MIN_N) -> np.ndarray:
    """Validates samples and moves zeros to a small positive value."""
    y = np.asarray(samples, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise FitError("samples contain non-finite values")
    if y.size < min_n:
        raise FitError(f"need at least {min_n} samples to fit, got {y.size}")
    if np.any(y < 0):
        raise FitError("samples must be non-negative")
    positive = y[y > 0]
    if positive.size == 0:
        raise FitError("all samples are zero")
    if positive.size < y.size:
        y = np.where(y > 0, y, ZERO_SHIFT * np.median(positive))
    return y


def _burr_start(z: np.ndarray) -> np.ndarray:
    """log(c, k, λ) start: λ = median, k = 1, c from the log-log slope of the upper survival tail."""
    ordered = np.sort(z)
    n = ordered.size
    survival = 1.0 - (np.arange(1, n + 1) - 0.5) / n
    tail = ordered > np.median(ordered)
    c0 = 1.0
    if tail.sum() >= 3 and np.ptp(np.log(ordered[tail])) > 0:
        slope = np.polyfit(np.log(ordered[tail]), np.log(survival[tail]), 1)[0]
        c0 = float(np.clip(-slope, 0.1, 50.0))
    return np.log([c0, 1.0, float(np.median(z))])


def _burr_nll(theta: np.ndarray, z: np.ndarray) -> float:
    c, k, scale = np.exp(theta)
    value = -np.sum(stats.burr12.logpdf(z, c, k, scale=scale))
    return float(value) if np.isfinite(value) else _BAD_NLL


def fit_weibull(y: np.ndarray) -> Tuple[ParametricDist, float]:
    """Weibull MLE: closed-form scale given the shape, bounded 1-D search on log shape."""
    scale_ref = float(np.median(y))
    z = y / scale_ref
    logz = np.log(z)
    n = z.size

    def profile_nll(log_k: float) -> float:
        k = np.exp(log_k)
        lam = np.mean(z ** k) ** (1.0 / k)
        ll = n * np.log(k) - n * k * np.log(lam) + (k - 1) * logz.sum() - n
        return -ll if np.isfinite(ll) else _BAD_NLL

    result = optimize.minimize_scalar(
        profile_nll, bounds=(np.log(1e-3), np.log(1e3)), method="bounded", options={"xatol": 1e-10}
    )
    k = float(np.exp(result.x))
    lam = float(np.mean(z ** k) ** (1.0 / k)) * scale_ref
    dist = ParametricDist.weibull(k, lam)
    return dist, float(np.sum(dist.logpdf(y)))


def fit_mle(
    samples,
    min_n: int = DEFAULT_MIN_N,
    max_iter: int = DEFAULT_MAX_ITER,
    bounds: Tuple[float, float] = DEFAULT_BOUNDS,
) -> FitReport:
    """
    Burr XII maximum likelihood by Nelder-Mead, with a Weibull fallback.

    The fit runs on samples divided by their median. It is declared failed
    when the simplex does not converge within max_iter iterations, ends on a
    non-finite likelihood, or any parameter (scale measured in medians) leaves
    the bounds; the Weibull fit then replaces it.

    Args:
        samples: Non-negative loss amounts.
        min_n (int): Minimum sample count.
        max_iter (int): Simplex iteration cap.
        bounds (Tuple[float, float]): Admissible parameter range.

    Returns:
        FitReport: Fitted distribution and fit diagnostics.

    Raises:
        FitError: On too few or non-finite samples.
    """
    y = prepare_samples(samples, min_n)
    median = float(np.median(y))
    z = y / median
    theta0 = _burr_start(z)
    start_nll = _burr_nll(theta0, z)
    log_median_total = y.size * np.log(median)

    result = optimize.minimize(
        _burr_nll,
        theta0,
        args=(z,),
        method="Nelder-Mead",
        options={"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-8},
    )
    c, k, scale = np.exp(result.x)
    low, high = bounds
    in_bounds = all(low <= value <= high for value in (c, k, scale))
    converged = bool(result.success) and result.fun < _BAD_NLL and in_bounds
    start_loglik = -start_nll - log_median_total

    if converged:
        dist = ParametricDist.burr(c, k, scale * median)
        loglik = -float(result.fun) - log_median_total
        logger.debug("Burr fit converged after %d iterations: %s", result.nit, dist.params())
        return FitReport(dist, False, loglik, int(result.nit), True, start_loglik)

    logger.warning(
        "Burr fit failed (success=%s, params c=%.3g k=%.3g scale=%.3g); fitting Weibull instead",
        result.success,
        c,
        k,
        scale,
    )
    dist, loglik = fit_weibull(y)
    return FitReport(dist, True, loglik, int(result.nit), False, start_loglik)


@dataclass(frozen=True)
class QuantileMap:
    """CDF matching: y_g = target.quantile(source.cdf(y_p))."""

    source: ParametricDist
    target: ParametricDist

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        lower = self.source.cdf(y)
        upper = self.source.sf(y)
        # the survival branch keeps precision where the CDF rounds to 1
        return np.where(lower <= 0.5, self.target.quantile(lower), self.target.isf(upper))

    def to_dict(self) -> dict:
        return {"source": self.source.to_dict(), "target": self.target.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "QuantileMap":
        return cls(ParametricDist.from_dict(data["source"]), ParametricDist.from_dict(data["target"]))


def build_quantile_map(pred: ParametricDist, ref: ParametricDist) -> QuantileMap:
    return QuantileMap(source=pred, target=ref)


def apply_quantile_map(quantile_map: QuantileMap, y) -> np.ndarray:
    """Elementwise, rank-preserving bias correction of non-negative predictions."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("quantile mapping expects non-negative values")
    return quantile_map(y)
