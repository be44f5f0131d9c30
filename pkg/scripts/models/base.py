from abc import ABC, abstractmethod
from typing import List, Optional, Tuple

import numpy as np

from utils import load_config, setup_logger, section
from scripts.features import FeatureMatrix
from scripts.models.gbt import feature_importance, gbt_predict, random_search
from scripts.models.gp import gp_fit, gp_predict


class Regressor(ABC):
    """
    Interface every loss regressor implements.

    A regressor is trained once on standardized training rows and is then
    immutable; backtest windows only call fit, predict and report.
    """

    kind: str = ""

    def __init__(self, n_jobs: int = 1):
        self.config = load_config()
        self.logger = setup_logger(self.__class__.__name__, self.config)
        self.n_jobs = n_jobs
        self.model = None

    @abstractmethod
    def fit(self, matrix: FeatureMatrix, seed: int) -> "Regressor":
        """Trains on every row of the matrix."""
        pass

    @abstractmethod
    def predict(self, matrix: FeatureMatrix) -> np.ndarray:
        pass

    @abstractmethod
    def report(self) -> dict:
        """JSON-ready summary of the trained model."""
        pass

    def importance(self) -> Optional[List[Tuple[str, float]]]:
        return None

    def _require_fitted(self) -> None:
        if self.model is None:
            raise RuntimeError(f"{self.__class__.__name__} has not been fitted")


class GBTRegressor(Regressor):
    kind = "gbt"

    def __init__(self, n_jobs: int = 1, cycles: Optional[int] = None):
        super().__init__(n_jobs)
        search = section(self.config, "gbt").get("search", {}) or {}
        self.cycles = int(cycles if cycles is not None else search.get("cycles", 100))
        self.search = None

    def fit(self, matrix: FeatureMatrix, seed: int) -> "GBTRegressor":
        self.search = random_search(matrix, cycles=self.cycles, seed=seed, n_jobs=self.n_jobs)
        self.model = self.search.model
        self.logger.info(
            "GBT trained on %d rows with %d trees", matrix.n, len(self.model.trees)
        )
        return self

    def predict(self, matrix: FeatureMatrix) -> np.ndarray:
        self._require_fitted()
        return gbt_predict(self.model, matrix)

    def importance(self) -> List[Tuple[str, float]]:
        self._require_fitted()
        return feature_importance(self.model)

    def report(self) -> dict:
        self._require_fitted()
        return {
            "kind": self.kind,
            "params": self.search.best_params.to_dict(),
            "validation_rmse": self.search.best_score,
            "trees": len(self.model.trees),
        }


class GPRegressor(Regressor):
    kind = "gp"

    def fit(self, matrix: FeatureMatrix, seed: int) -> "GPRegressor":
        self.model = gp_fit(matrix, seed=seed, n_jobs=self.n_jobs)
        return self

    def predict(self, matrix: FeatureMatrix) -> np.ndarray:
        self._require_fitted()
        mean, _ = gp_predict(self.model, matrix)
        return mean

    def report(self) -> dict:
        self._require_fitted()
        return {
            "kind": self.kind,
            "config": self.model.config.to_dict(),
            "cv_rmse": self.model.cv_rmse,
            "prior_var": self.model.prior_var,
            "coefficients": [float(c) for c in self.model.coefficients],
        }


REGRESSORS = {GBTRegressor.kind: GBTRegressor, GPRegressor.kind: GPRegressor}


def make_regressor(kind: str, n_jobs: int = 1, **kwargs) -> Regressor:
    try:
        cls = REGRESSORS[kind]
    except KeyError:
        raise ValueError(f"unknown regressor '{kind}', expected one of {sorted(REGRESSORS)}")
    return cls(n_jobs=n_jobs, **kwargs)
