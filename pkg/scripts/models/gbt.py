from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, TextIO, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from utils import load_config, setup_logger, section
from scripts.errors import RegressorError
from scripts.features import FeatureMatrix, split
from scripts.seeding import derive_seed

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

_settings = section(config, "gbt")
_search_settings = _settings.get("search", {}) or {}

FORMAT_VERSION = "gbt-model v1"
LEAF = -1
# splits below this fraction of the node's squared residual are rounding noise
_RELATIVE_GAIN_FLOOR = 1e-12


@dataclass(frozen=True)
class GBTParams:
    eta: float = float(_settings.get("eta", 0.3))
    colsample: float = float(_settings.get("colsample", 1.0))
    max_depth: int = int(_settings.get("max_depth", 6))
    subsample: float = float(_settings.get("subsample", 1.0))
    gamma: float = float(_settings.get("gamma", 0.0))
    reg_lambda: float = float(_settings.get("reg_lambda", 1.0))
    n_rounds: int = int(_settings.get("n_rounds", 100))
    patience: int = int(_settings.get("patience", 50))

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        for name in ("colsample", "subsample"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValueError(f"max_depth must be an integer >= 1, got {self.max_depth}")
        if self.gamma < 0 or self.reg_lambda < 0:
            raise ValueError("gamma and reg_lambda must be >= 0")
        if self.n_rounds < 1:
            raise ValueError(f"n_rounds must be >= 1, got {self.n_rounds}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GBTParams":
        return cls(**data)


@dataclass(frozen=True)
class Tree:
    """Preorder node arrays; leaves carry feature == LEAF."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    @property
    def depth(self) -> int:
        depths = np.zeros(len(self.feature), dtype=int)
        for node in range(len(self.feature)):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape[0])
        stack = [(0, np.arange(x.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if self.feature[node] == LEAF:
                out[rows] = self.value[node]
                continue
            goes_left = x[rows, self.feature[node]] < self.threshold[node]
            stack.append((int(self.left[node]), rows[goes_left]))
            stack.append((int(self.right[node]), rows[~goes_left]))
        return out


@dataclass(frozen=True)
class GBTModel:
    base: float
    trees: Tuple[Tree, ...]
    gains: np.ndarray
    feature_names: Tuple[str, ...]
    params: GBTParams
    best_round: int = 0
    val_history: Tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.gains) != len(self.feature_names):
            raise ValueError("one accumulated gain per feature is required")
        for tree in self.trees:
            if tree.depth > self.params.max_depth:
                raise ValueError(f"tree depth {tree.depth} exceeds max_depth {self.params.max_depth}")
            used = tree.feature[tree.feature != LEAF]
            if used.size and used.max() >= len(self.feature_names):
                raise ValueError("tree references a feature outside the training matrix")


@dataclass
class HyperSearchResult:
    best_params: GBTParams
    best_score: float
    trials: List[Tuple[GBTParams, float]] = field(default_factory=list)
    model: Optional[GBTModel] = None

    def __post_init__(self):
        if self.trials and self.best_score != min(score for _, score in self.trials):
            raise ValueError("best score must be the minimum of the trial log")

    def to_dict(self) -> dict:
        return {
            "best_params": self.best_params.to_dict(),
            "best_score": self.best_score,
            "trials": [{"params": p.to_dict(), "score": s} for p, s in self.trials],
        }


# ─── TREE GROWING ─────────────────────────────────────────────────────────────


def _best_split(
    x: np.ndarray, r: np.ndarray, rows: np.ndarray, features: np.ndarray, reg_lambda: float
) -> Tuple[float, int, float]:
    """Exact greedy split with unit Hessians: returns (gain, feature, threshold)."""
    residual = r[rows]
    total = residual.sum()
    count = rows.size
    parent = total * total / (count + reg_lambda)
    best_gain, best_feature, best_threshold = -np.inf, LEAF, 0.0
    left_count = np.arange(1, count)
    right_count = count - left_count
    for j in features:
        values = x[rows, j]
        order = np.argsort(values, kind="stable")
        ordered = values[order]
        distinct = ordered[:-1] < ordered[1:]
        if not distinct.any():
            continue
        left_sum = np.cumsum(residual[order])[:-1]
        right_sum = total - left_sum
        gain = 0.5 * (
            left_sum**2 / (left_count + reg_lambda)
            + right_sum**2 / (right_count + reg_lambda)
            - parent
        )
        gain = np.where(distinct, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = float(gain[i])
            best_feature = int(j)
            best_threshold = 0.5 * (ordered[i] + ordered[i + 1])
    return best_gain, best_feature, best_threshold


def _grow_tree(
    x: np.ndarray, r: np.ndarray, rows: np.ndarray, features: np.ndarray, params: GBTParams
) -> Tree:
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []
    gain: List[float] = []

    def build(node_rows: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(r[node_rows].sum() / (node_rows.size + params.reg_lambda)))
        gain.append(0.0)
        if depth >= params.max_depth or node_rows.size < 2:
            return node
        split_gain, j, cut = _best_split(x, r, node_rows, features, params.reg_lambda)
        floor = _RELATIVE_GAIN_FLOOR * float(np.sum(r[node_rows] ** 2))
        if j == LEAF or split_gain <= params.gamma or split_gain <= floor:
            return node
        goes_left = x[node_rows, j] < cut
        feature[node], threshold[node], gain[node] = j, cut, split_gain
        left[node] = build(node_rows[goes_left], depth + 1)
        right[node] = build(node_rows[~goes_left], depth + 1)
        return node

    build(rows, 0)
    return Tree(
        feature=np.array(feature, dtype=int),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=int),
        right=np.array(right, dtype=int),
        value=np.array(value, dtype=float),
        gain=np.array(gain, dtype=float),
    )


def _sample(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(n)
    size = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=size, replace=False))


def _as_arrays(x: Union[FeatureMatrix, np.ndarray], y=None) -> Tuple[np.ndarray, Optional[np.ndarray], Tuple[str, ...]]:
    if isinstance(x, FeatureMatrix):
        return x.values, (x.y if y is None else np.asarray(y, dtype=float)), tuple(x.names)
    values = np.asarray(x, dtype=float)
    if values.ndim != 2:
        raise RegressorError("predictor matrix must be 2-D")
    names = tuple(f"x{j}" for j in range(values.shape[1]))
    return values, (None if y is None else np.asarray(y, dtype=float)), names


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


# ─── TRAIN / PREDICT ──────────────────────────────────────────────────────────


def gbt_train(
    x: Union[FeatureMatrix, np.ndarray],
    params: GBTParams = GBTParams(),
    val: Optional[Union[FeatureMatrix, Tuple[np.ndarray, np.ndarray]]] = None,
    seed: int = 0,
    y: Optional[np.ndarray] = None,
) -> GBTModel:
    """
    Boosted regression trees on squared loss.

    Round m fits a tree to the residuals y - F_m(x) and adds eta times its
    leaf weights. A tree that cannot split its root adds nothing and is not
    kept. With validation rows, training stops once validation RMSE has not
    improved for `params.patience` rounds and the forest is cut back to the
    best round.

    Args:
        x: Training rows (FeatureMatrix, or a 2-D array together with `y`).
        params (GBTParams): Hyperparameters.
        val: Optional validation rows, a FeatureMatrix or an (x, y) pair.
        seed (int): Seed for row and column subsampling.
        y: Response when `x` is a plain array.

    Returns:
        GBTModel: Trained, immutable model.

    Raises:
        RegressorError: On an empty training set or non-finite responses.
    """
    values, target, names = _as_arrays(x, y)
    if target is None:
        raise RegressorError("training response is required")
    n, p = values.shape
    if n == 0:
        raise RegressorError("training set is empty")
    if not np.all(np.isfinite(target)) or not np.all(np.isfinite(values)):
        raise RegressorError("training data contains non-finite values")

    val_x = val_y = None
    if val is not None:
        val_x, val_y, _ = _as_arrays(*val) if isinstance(val, tuple) else _as_arrays(val)
        if val_x.shape[1] != p:
            raise RegressorError("validation columns do not match the training columns")

    base = float(target[0]) if np.ptp(target) == 0 else float(np.mean(target))
    fitted = np.full(n, base)
    val_fitted = None if val_x is None else np.full(val_x.shape[0], base)
    rng = np.random.default_rng(seed)
    deterministic = params.subsample >= 1.0 and params.colsample >= 1.0

    trees: List[Tree] = []
    history: List[float] = []
    best_score, best_trees, stale = np.inf, 0, 0
    for round_index in range(params.n_rounds):
        features = _sample(rng, p, params.colsample)
        rows = _sample(rng, n, params.subsample)
        residual = target - fitted
        tree = _grow_tree(values, residual, rows, features, params)
        if tree.n_leaves > 1:
            trees.append(tree)
            fitted = fitted + params.eta * tree.predict(values)
            if val_fitted is not None:
                val_fitted = val_fitted + params.eta * tree.predict(val_x)
        elif deterministic:
            logger.debug("No split beats gamma at round %d; stopping", round_index)
            break

        if val_fitted is not None:
            score = _rmse(val_fitted, val_y)
            history.append(score)
            if score < best_score:
                best_score, best_trees, stale = score, len(trees), 0
            else:
                stale += 1
                if stale >= params.patience:
                    logger.debug("Early stop at round %d, best validation RMSE %.6g", round_index, best_score)
                    break

    if val_fitted is not None and history:
        trees = trees[:best_trees]

    gains = np.zeros(p)
    for tree in trees:
        split_nodes = tree.feature != LEAF
        np.add.at(gains, tree.feature[split_nodes], tree.gain[split_nodes])
    return GBTModel(
        base=base,
        trees=tuple(trees),
        gains=gains,
        feature_names=names,
        params=params,
        best_round=len(trees),
        val_history=tuple(history),
    )


def gbt_predict(model: GBTModel, x: Union[FeatureMatrix, np.ndarray]) -> np.ndarray:
    """base + sum over trees of eta * tree(x), row by row."""
    if isinstance(x, FeatureMatrix):
        if tuple(x.names) != model.feature_names:
            raise RegressorError("prediction columns do not match the training columns")
        values = x.values
    else:
        values = np.asarray(x, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(model.feature_names):
            raise RegressorError(
                f"expected {len(model.feature_names)} columns, got shape {values.shape}"
            )
    out = np.full(values.shape[0], model.base)
    for tree in model.trees:
        out = out + model.params.eta * tree.predict(values)
    return out


def feature_importance(model: GBTModel) -> List[Tuple[str, float]]:
    """Accumulated split gain per feature scaled so the largest is 1.0, in descending order."""
    gains = model.gains
    top = gains.max() if gains.size else 0.0
    scaled = gains / top if top > 0 else np.zeros_like(gains)
    order = sorted(range(len(gains)), key=lambda j: (-scaled[j], j))
    return [(model.feature_names[j], float(scaled[j])) for j in order]


# ─── HYPERPARAMETER SEARCH ────────────────────────────────────────────────────


def default_ranges() -> Dict[str, Tuple[float, float]]:
    return {
        name: tuple(_search_settings.get(name, default))
        for name, default in (
            ("eta", (0.0001, 1.0)),
            ("colsample", (0.1, 1.0)),
            ("max_depth", (2, 10)),
            ("subsample", (0.1, 1.0)),
            ("gamma", (0.01, 100.0)),
        )
    }


def sample_params(
    rng: np.random.Generator, ranges: Dict[str, Tuple[float, float]], n_rounds: int, base: GBTParams = GBTParams()
) -> GBTParams:
    """Uniform draw over the ranges; max_depth is drawn from the integers in its range."""
    low_depth, high_depth = (int(v) for v in ranges["max_depth"])
    return replace(
        base,
        eta=float(rng.uniform(*ranges["eta"])),
        colsample=float(rng.uniform(*ranges["colsample"])),
        max_depth=int(rng.integers(low_depth, high_depth + 1)),
        subsample=float(rng.uniform(*ranges["subsample"])),
        gamma=float(rng.uniform(*ranges["gamma"])),
        n_rounds=n_rounds,
    )


def _run_trial(
    values: np.ndarray,
    target: np.ndarray,
    learn: np.ndarray,
    check: np.ndarray,
    params: GBTParams,
    seed: int,
) -> float:
    model = gbt_train(values[learn], params, val=(values[check], target[check]), seed=seed, y=target[learn])
    return _rmse(gbt_predict(model, values[check]), target[check])


def random_search(
    x: Union[FeatureMatrix, np.ndarray],
    y: Optional[np.ndarray] = None,
    ranges: Optional[Dict[str, Tuple[float, float]]] = None,
    cycles: int = int(_search_settings.get("cycles", 100)),
    seed: int = 0,
    rounds: int = int(_search_settings.get("rounds", 100)),
    final_rounds: int = int(_search_settings.get("final_rounds", 100)),
    validation_ratio: float = float(_search_settings.get("validation_ratio", 0.7)),
    n_jobs: int = 1,
) -> HyperSearchResult:
    """
    Uniform random hyperparameter search on a learn/validate split of the training rows.

    Every cycle draws parameters from `ranges` with its own derived seed, trains
    with early stopping on the validation rows, and scores validation RMSE. The
    best parameters are then retrained on all rows for `final_rounds` rounds.

    Args:
        x: Training rows (FeatureMatrix or 2-D array).
        y: Response when `x` is a plain array.
        ranges: Sampling ranges for eta, colsample, max_depth, subsample and gamma.
        cycles (int): Number of trials.
        seed (int): Master seed for the split, trial draws and the final fit.
        rounds (int): Boosting rounds per trial.
        final_rounds (int): Boosting rounds of the retrained model.
        validation_ratio (float): Fraction of rows used for learning.
        n_jobs (int): joblib worker count for trials.

    Returns:
        HyperSearchResult: Best parameters and score, trial log, final model.
    """
    if cycles < 1:
        raise ValueError(f"cycles must be >= 1, got {cycles}")
    values, target, names = _as_arrays(x, y)
    ranges = ranges or default_ranges()
    learn, check = split(values.shape[0], validation_ratio, derive_seed(seed, "search-split"))

    trial_params = [
        sample_params(np.random.default_rng(derive_seed(seed, "trial", i)), ranges, rounds)
        for i in range(cycles)
    ]
    scores = Parallel(n_jobs=n_jobs)(
        delayed(_run_trial)(values, target, learn, check, params, derive_seed(seed, "trial-fit", i))
        for i, params in enumerate(trial_params)
    )
    trials = list(zip(trial_params, (float(s) for s in scores)))
    best_index = int(np.argmin([score for _, score in trials]))
    best_params, best_score = trials[best_index]
    logger.info(
        "Random search: %d trials, best validation RMSE %.6g (trial %d)", cycles, best_score, best_index
    )

    final = gbt_train(
        values, replace(best_params, n_rounds=final_rounds), seed=derive_seed(seed, "final"), y=target
    )
    final = replace(final, feature_names=names)
    return HyperSearchResult(best_params, best_score, trials, final)


# ─── TEXT FORMAT ──────────────────────────────────────────────────────────────


def write_model(model: GBTModel, stream: TextIO) -> None:
    """Versioned text: header lines, then one preorder node list per tree."""
    stream.write(f"{FORMAT_VERSION}\n")
    stream.write(f"base {model.base!r}\n")
    stream.write("features " + "\t".join(model.feature_names) + "\n")
    stream.write(
        "params " + " ".join(f"{k}={v!r}" for k, v in model.params.to_dict().items()) + "\n"
    )
    stream.write("gains " + " ".join(repr(float(g)) for g in model.gains) + "\n")
    stream.write(f"trees {len(model.trees)}\n")
    for tree in model.trees:
        stream.write(f"tree {len(tree.feature)}\n")
        for node in range(len(tree.feature)):
            stream.write(
                f"{tree.feature[node]} {float(tree.threshold[node])!r} {tree.left[node]} "
                f"{tree.right[node]} {float(tree.value[node])!r} {float(tree.gain[node])!r}\n"
            )


def read_model(stream: TextIO) -> GBTModel:
    lines = iter(stream.read().splitlines())
    version = next(lines)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format '{version}'")

    def field_of(prefix: str) -> str:
        line = next(lines)
        if not line.startswith(prefix):
            raise ValueError(f"expected '{prefix}' line, got '{line}'")
        return line[len(prefix):].lstrip(" ")

    base = float(field_of("base"))
    names_line = field_of("features")
    names = tuple(names_line.split("\t")) if names_line else ()
    raw_params = dict(pair.split("=", 1) for pair in field_of("params").split())
    params = GBTParams(
        **{
            key: (int(value) if key in ("max_depth", "n_rounds", "patience") else float(value))
            for key, value in raw_params.items()
        }
    )
    gains_line = field_of("gains")
    gains = np.array([float(v) for v in gains_line.split()], dtype=float)
    trees = []
    for _ in range(int(field_of("trees"))):
        rows = [next(lines).split() for _ in range(int(field_of("tree")))]
        trees.append(
            Tree(
                feature=np.array([int(r[0]) for r in rows], dtype=int),
                threshold=np.array([float(r[1]) for r in rows]),
                left=np.array([int(r[2]) for r in rows], dtype=int),
                right=np.array([int(r[3]) for r in rows], dtype=int),
                value=np.array([float(r[4]) for r in rows]),
                gain=np.array([float(r[5]) for r in rows]),
            )
        )
    return GBTModel(base, tuple(trees), gains, names, params, best_round=len(trees))
