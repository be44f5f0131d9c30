from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd

from utils import load_config, setup_logger, section
from scripts.claims.table import ClaimTable

# ─── LOGGER & CONFIG ────────────────────────────────────────────────────────────────
config = load_config()
logger = setup_logger(__name__, config)

DEFAULT_SPLIT_RATIO = float(section(config, "features").get("split_ratio", 0.7))
DEGENERATE_SIGMA = 1e-12
_HEADER_SEPARATOR = "|"
_RESPONSE_HEADER = "__response__"


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    source: str
    kind: str  # "continuous" or "indicator"

    def __post_init__(self):
        if self.kind not in ("continuous", "indicator"):
            raise ValueError(f"column kind must be continuous or indicator, got '{self.kind}'")


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense design matrix, its column provenance, and the response vector."""

    values: np.ndarray
    columns: Tuple[ColumnMeta, ...]
    y: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-D array")
        if self.values.shape[1] != len(self.columns):
            raise ValueError(
                f"matrix has {self.values.shape[1]} columns but {len(self.columns)} metadata entries"
            )
        if len(self.y) != self.values.shape[0]:
            raise ValueError("response length must match the row count")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def names(self) -> List[str]:
        return [column.name for column in self.columns]

    def continuous_columns(self) -> np.ndarray:
        return np.array([column.kind == "continuous" for column in self.columns], dtype=bool)

    def take(self, rows: Sequence[int]) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=int)
        return replace(self, values=self.values[rows], y=self.y[rows])


@dataclass(frozen=True)
class ScalerParams:
    names: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray

    def __post_init__(self):
        if np.any(self.std < 0):
            raise ValueError("standard deviations must be non-negative")
        if not np.array_equal(self.degenerate, self.std < DEGENERATE_SIGMA):
            raise ValueError("degenerate flags must mark exactly the columns with sigma below 1e-12")

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }


def fit_levels(table: ClaimTable) -> Dict[str, List[str]]:
    """Observed levels per categorical predictor, sorted lexicographically."""
    return {
        name: sorted(set(table.columns[name][~table.mask[name]].tolist()))
        for name in table.names_of_kind("categorical")
    }


def one_hot(table: ClaimTable, levels: Optional[Dict[str, List[str]]] = None) -> FeatureMatrix:
    """
    Expands categorical predictors into indicator columns and copies continuous ones.

    Column order follows the table's field order, then levels in lexicographic
    order. When `levels` comes from training rows, a level unseen there yields
    an all-zero indicator block for that field.

    Args:
        table (ClaimTable): Imputed table (no raw missing categorical cells).
        levels (Optional[Dict[str, List[str]]]): Level sets to encode against.
            Defaults to the table's own levels.

    Returns:
        FeatureMatrix: Encoded predictors and the response vector.
    """
    levels = levels if levels is not None else fit_levels(table)
    blocks: List[np.ndarray] = []
    columns: List[ColumnMeta] = []
    for name in table.field_names:
        kind = table.kind(name)
        role = table.schema[name].role if name in table.schema else "predictor"
        if role != "predictor":
            continue
        if kind == "continuous":
            blocks.append(table.columns[name].astype(float).reshape(-1, 1))
            columns.append(ColumnMeta(name, name, "continuous"))
        elif kind == "categorical":
            if table.mask[name].any():
                raise ValueError(f"categorical field '{name}' still has missing cells")
            tokens = table.columns[name]
            for level in sorted(levels.get(name, [])):
                blocks.append((tokens == level).astype(float).reshape(-1, 1))
                columns.append(ColumnMeta(f"{name}.{level}", name, "indicator"))

    values = np.hstack(blocks) if blocks else np.zeros((table.n, 0))
    response = table.schema.response
    y = np.where(table.mask[response], np.nan, table.columns[response]).astype(float)
    logger.info("Encoded %d rows into %d predictors", table.n, len(columns))
    return FeatureMatrix(values=values, columns=tuple(columns), y=y)


def decode_categories(matrix: FeatureMatrix) -> Dict[str, np.ndarray]:
    """Inverts one_hot for categorical fields; rows with no active indicator decode to ""."""
    decoded: Dict[str, np.ndarray] = {}
    sources: Dict[str, List[int]] = {}
    for j, column in enumerate(matrix.columns):
        if column.kind == "indicator":
            sources.setdefault(column.source, []).append(j)
    for source, indices in sources.items():
        block = matrix.values[:, indices]
        labels = np.array(
            [matrix.columns[j].name[len(source) + 1:] for j in indices], dtype=object
        )
        out = labels[np.argmax(block, axis=1)]
        out[block.max(axis=1) < 0.5] = ""
        decoded[source] = out
    return decoded


def standardize_fit(matrix: FeatureMatrix, train_rows: Sequence[int]) -> ScalerParams:
    """Mean and unbiased (n-1) standard deviation of continuous columns over training rows."""
    train_rows = np.asarray(train_rows, dtype=int)
    if train_rows.size == 0:
        raise ValueError("standardize_fit needs at least one training row")
    continuous = np.flatnonzero(matrix.continuous_columns())
    block = matrix.values[np.ix_(train_rows, continuous)]
    mean = block.mean(axis=0)
    if train_rows.size > 1:
        std = block.std(axis=0, ddof=1)
    else:
        std = np.zeros(len(continuous))
    degenerate = std < DEGENERATE_SIGMA
    std = np.where(degenerate, 0.0, std)
    return ScalerParams(
        names=tuple(matrix.columns[j].name for j in continuous),
        mean=mean,
        std=std,
        degenerate=degenerate,
    )


def standardize_apply(matrix: FeatureMatrix, scaler: ScalerParams) -> FeatureMatrix:
    """(v - mean) / sigma for continuous columns; degenerate columns become 0."""
    continuous = np.flatnonzero(matrix.continuous_columns())
    names = tuple(matrix.columns[j].name for j in continuous)
    if names != scaler.names:
        raise ValueError("matrix continuous columns do not match the scaler")
    values = matrix.values.copy()
    safe_std = np.where(scaler.degenerate, 1.0, scaler.std)
    scaled = (values[:, continuous] - scaler.mean) / safe_std
    scaled[:, scaler.degenerate] = 0.0
    values[:, continuous] = scaled
    return replace(matrix, values=values)


def split(n: int, ratio: float = DEFAULT_SPLIT_RATIO, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Seeded random partition of range(n) into sorted train and test index arrays.

    |train| = round(ratio * n), kept within [1, n - 1].
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    if n < 2:
        raise ValueError(f"split needs at least 2 rows, got {n}")
    n_train = int(np.floor(ratio * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def write_feature_matrix(matrix: FeatureMatrix, stream: TextIO) -> None:
    """Header of name|source|kind triplets (response last), then one row per claim."""
    header = [
        _HEADER_SEPARATOR.join((column.name, column.source, column.kind))
        for column in matrix.columns
    ] + [_RESPONSE_HEADER]
    rows = np.column_stack([matrix.values, matrix.y]) if matrix.n else np.zeros((0, len(header)))
    frame = pd.DataFrame([[repr(float(v)) for v in row] for row in rows], columns=header)
    frame.to_csv(stream, index=False, lineterminator="\n")


def read_feature_matrix(stream: TextIO) -> FeatureMatrix:
    frame = pd.read_csv(stream, dtype=str, keep_default_na=False)
    header = list(frame.columns)
    if not header or header[-1] != _RESPONSE_HEADER:
        raise ValueError("feature matrix header must end with the response column")
    columns = tuple(ColumnMeta(*cell.split(_HEADER_SEPARATOR)) for cell in header[:-1])
    data = np.array([[float(cell) for cell in row] for row in frame.itertuples(index=False)])
    data = data.reshape(len(frame), len(header))
    return FeatureMatrix(values=data[:, :-1], columns=columns, y=data[:, -1])
