from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.special import kolmogorov
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import train_test_split

from utils import load_config, setup_logger, section
from scripts.distributions import ParametricDist
from scripts.errors import ProtocolError, QuadratureError
from scripts.models.gbt import GBTParams, gbt_predict, gbt_train

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

_settings = section(config, "metrics")
ALPHA = float(_settings.get("alpha", 0.05))
QUAD_REL_TOL = float(_settings.get("quad_rel_tol", 1e-8))
_discriminator = _settings.get("discriminator", {}) or {}
DISCRIMINATOR_PARAMS = GBTParams(
    eta=float(_discriminator.get("eta", 0.1)),
    max_depth=int(_discriminator.get("max_depth", 3)),
    n_rounds=int(_discriminator.get("n_rounds", 100)),
    colsample=1.0,
    subsample=1.0,
    gamma=0.0,
)

LOWER_TAIL = 1e-10
UPPER_TAIL = 1e-6
DOMAIN_FLOOR = 1e-12
KL_NOISE = 1e-6
SV_FLOOR = 1e-18
_BREAK_PROBS = (1e-6, 1e-3, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999)


# ─── POINTWISE ────────────────────────────────────────────────────────────────


def _pair(y_pred, y_ref) -> Tuple[np.ndarray, np.ndarray]:
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    y_ref = np.asarray(y_ref, dtype=float).ravel()
    if y_pred.shape != y_ref.shape:
        raise ValueError(f"length mismatch: {y_pred.size} predictions vs {y_ref.size} references")
    return y_pred, y_ref


def rmse(y_pred, y_ref) -> float:
    y_pred, y_ref = _pair(y_pred, y_ref)
    if y_pred.size == 0:
        raise ValueError("rmse needs at least one value")
    return float(np.sqrt(np.mean((y_pred - y_ref) ** 2)))


def rmse_sigma(y_pred, y_ref) -> Optional[float]:
    """RMSE over the (n-1) standard deviation of the references; None when that is 0."""
    y_pred, y_ref = _pair(y_pred, y_ref)
    if y_ref.size < 2:
        raise ValueError("rmse_sigma needs at least two values")
    sigma = float(np.std(y_ref, ddof=1))
    if sigma == 0.0:
        logger.warning("Reference values are constant; RMSE/sigma is undefined")
        return None
    return rmse(y_pred, y_ref) / sigma


# ─── KOLMOGOROV-SMIRNOV ───────────────────────────────────────────────────────


def ks_one_sample(samples, dist: ParametricDist) -> Tuple[float, float]:
    """Largest gap between the empirical CDF and dist's CDF, with its asymptotic p-value."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("ks_one_sample needs at least one sample")
    cdf = dist.cdf(x)
    ranks = np.arange(1, n + 1)
    d_plus = np.max(ranks / n - cdf)
    d_minus = np.max(cdf - (ranks - 1) / n)
    d = float(max(d_plus, d_minus))
    return d, float(kolmogorov(np.sqrt(n) * d))


def ks_two_sample(a, b) -> Tuple[float, float]:
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_two_sample needs two non-empty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    effective_n = a.size * b.size / (a.size + b.size)
    return d, float(kolmogorov(np.sqrt(effective_n) * d))


# ─── QUADRATURE ───────────────────────────────────────────────────────────────


def quadrature_domain(p: ParametricDist, q: ParametricDist) -> Tuple[float, float]:
    lower = max(min(float(p.quantile(LOWER_TAIL)), float(q.quantile(LOWER_TAIL))), DOMAIN_FLOOR)
    upper = max(float(p.isf(UPPER_TAIL)), float(q.isf(UPPER_TAIL)))
    return lower, upper


def breakpoints(*dists: ParametricDist) -> np.ndarray:
    return np.unique(np.concatenate([d.quantile(np.array(_BREAK_PROBS)) for d in dists]))


def integrate_segments(
    fn: Callable[[float], float],
    lower: float,
    upper: float,
    points: Sequence[float] = (),
    rel_tol: float = QUAD_REL_TOL,
) -> float:
    """
    Adaptive quadrature of fn over [lower, upper], split at the interior points.

    Raises:
        QuadratureError: If a segment's error estimate stays above 1e-6 of its scale.
    """
    if not upper > lower:
        raise QuadratureError(f"empty integration domain [{lower}, {upper}]")
    inner = [float(p) for p in np.unique(points) if lower < p < upper]
    edges = [lower] + inner + [upper]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        result = integrate.quad(fn, a, b, epsabs=1e-14, epsrel=rel_tol, limit=200, full_output=1)
        value, abserr = result[0], result[1]
        if len(result) > 3 and abserr > KL_NOISE * max(1.0, abs(value)):
            raise QuadratureError(
                f"quadrature did not converge on [{a:.6g}, {b:.6g}]: "
                f"value {value:.6g}, error estimate {abserr:.3g} ({result[3]})"
            )
        total += value
    return total


# ─── DISTRIBUTIONAL ───────────────────────────────────────────────────────────


def kl_divergence(p_ref: ParametricDist, q_pred: ParametricDist) -> float:
    """KL(p_ref || q_pred) over the shared quantile domain, clamped to 0 within quadrature noise."""
    lower, upper = quadrature_domain(p_ref, q_pred)

    def integrand(y: float) -> float:
        log_p = float(p_ref.logpdf(y))
        if not np.isfinite(log_p):
            return 0.0
        return float(np.exp(log_p) * (log_p - q_pred.logpdf(y)))

    value = integrate_segments(integrand, lower, upper, breakpoints(p_ref, q_pred))
    if value < 0:
        if value < -KL_NOISE:
            raise QuadratureError(f"KL divergence came out negative ({value:.3g})")
        value = 0.0
    return value


def density_r2(
    p_pdf: Callable[[float], float],
    q_pdf: Callable[[float], float],
    lower: float,
    upper: float,
    points: Sequence[float] = (),
) -> Optional[float]:
    """
    1 - S_r / S_v between two curves on [lower, upper].

    S_r integrates (p - q)^2; S_v integrates (p - mu)^2 where mu is the mean
    value of p over the domain. Returns None when S_v < 1e-18.
    """
    mu = integrate_segments(p_pdf, lower, upper, points) / (upper - lower)
    s_v = integrate_segments(lambda y: (p_pdf(y) - mu) ** 2, lower, upper, points)
    if s_v < SV_FLOOR:
        logger.warning("Reference density is flat over [%.3g, %.3g]; R2 undefined", lower, upper)
        return None
    s_r = integrate_segments(lambda y: (p_pdf(y) - q_pdf(y)) ** 2, lower, upper, points)
    return 1.0 - s_r / s_v


def density_mean(p_ref: ParametricDist, q_pred: ParametricDist) -> float:
    """mu_r: mean value of p_ref's density over the shared domain."""
    lower, upper = quadrature_domain(p_ref, q_pred)
    points = breakpoints(p_ref, q_pred)
    return integrate_segments(lambda y: float(p_ref.pdf(y)), lower, upper, points) / (upper - lower)


def dist_r2(p_ref: ParametricDist, q_pred: ParametricDist) -> Optional[float]:
    lower, upper = quadrature_domain(p_ref, q_pred)
    return density_r2(
        lambda y: float(p_ref.pdf(y)),
        lambda y: float(q_pred.pdf(y)),
        lower,
        upper,
        breakpoints(p_ref, q_pred),
    )


def discriminator_auc(ref_samples, pred_samples, seed: int = 0, params: GBTParams = DISCRIMINATOR_PARAMS) -> float:
    """
    ROC AUC of boosted trees telling predictions (label 1) from references (label 0).

    Trained as a regression on the labels over a stratified 70/30 split;
    0.5 means the two samples are indistinguishable.

    Raises:
        ProtocolError: If either class is too small to appear on both sides of the split.
    """
    ref = np.asarray(ref_samples, dtype=float).ravel()
    pred = np.asarray(pred_samples, dtype=float).ravel()
    if ref.size == 0 or pred.size == 0:
        raise ProtocolError("discriminator needs non-empty reference and prediction samples")
    x = np.concatenate([ref, pred]).reshape(-1, 1)
    labels = np.concatenate([np.zeros(ref.size), np.ones(pred.size)])
    try:
        x_train, x_test, y_train, y_test = train_test_split(
            x, labels, test_size=0.3, stratify=labels, random_state=seed
        )
    except ValueError as e:
        raise ProtocolError(f"discriminator split is degenerate: {e}") from e
    if np.unique(y_test).size < 2 or np.unique(y_train).size < 2:
        raise ProtocolError("discriminator split left a single class on one side")
    model = gbt_train(x_train, params, seed=seed, y=y_train)
    return float(roc_auc_score(y_test, gbt_predict(model, x_test)))


# ─── BUNDLE ───────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class MetricBundle:
    rmse: float
    rmse_over_sigma: Optional[float]
    ks_stat: float
    ks_p: float
    kl: Optional[float]
    dist_r2: Optional[float]
    auc: Optional[float]
    n_test: int
    flags: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.n_test < 0:
            raise ValueError("n_test must be >= 0")
        if not 0.0 <= self.ks_stat <= 1.0 or not 0.0 <= self.ks_p <= 1.0:
            raise ValueError("KS statistic and p-value must lie in [0, 1]")
        if self.kl is not None and self.kl < 0:
            raise ValueError("KL divergence must be >= 0")
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError("AUC must lie in [0, 1]")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not np.isfinite(value):
                raise ValueError(f"{f.name} must be finite or absent")

    @property
    def rejects(self) -> bool:
        """K-S rejection at the configured significance level."""
        return self.ks_p < ALPHA

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "rmse_over_sigma": self.rmse_over_sigma,
            "ks_stat": self.ks_stat,
            "ks_p": self.ks_p,
            "kl": self.kl,
            "dist_r2": self.dist_r2,
            "auc": self.auc,
            "n_test": self.n_test,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricBundle":
        return cls(**{**data, "flags": tuple(data.get("flags", ()))})


def _optional(label: str, fn, flags: list):
    try:
        return fn()
    except (QuadratureError, ProtocolError) as e:
        logger.warning("%s unavailable: %s", label, e)
        flags.append(f"{label}_failed")
        return None


def evaluate(
    y_pred,
    y_ref,
    ref_dist: Optional[ParametricDist] = None,
    pred_dist: Optional[ParametricDist] = None,
    seed: int = 0,
) -> MetricBundle:
    """
    All measures for one set of test predictions.

    The K-S test compares predictions against ref_dist when one is given and
    against the reference sample otherwise. KL and R2 need both fitted
    distributions and are absent without them.
    """
    y_pred, y_ref = _pair(y_pred, y_ref)
    flags = []
    if ref_dist is not None:
        ks_stat, ks_p = ks_one_sample(y_pred, ref_dist)
    else:
        ks_stat, ks_p = ks_two_sample(y_pred, y_ref)
        flags.append("ks_two_sample")
    ratio = rmse_sigma(y_pred, y_ref) if y_ref.size >= 2 else None
    if ratio is None:
        flags.append("rmse_sigma_absent")

    kl = r2 = None
    if ref_dist is not None and pred_dist is not None:
        kl = _optional("kl", lambda: kl_divergence(ref_dist, pred_dist), flags)
        r2 = _optional("dist_r2", lambda: dist_r2(ref_dist, pred_dist), flags)
        if r2 is None and "dist_r2_failed" not in flags:
            flags.append("dist_r2_absent")
    else:
        flags.append("no_parametric_fit")
    auc = _optional("auc", lambda: discriminator_auc(y_ref, y_pred, seed), flags)

    return MetricBundle(
        rmse=rmse(y_pred, y_ref),
        rmse_over_sigma=ratio,
        ks_stat=ks_stat,
        ks_p=ks_p,
        kl=kl,
        dist_r2=r2,
        auc=auc,
        n_test=int(y_ref.size),
        flags=tuple(flags),
    )
