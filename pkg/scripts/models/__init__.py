"""
Loss regressors: boosted trees and Gaussian processes behind one interface.

Usage:
    from scripts.models import make_regressor
    regressor = make_regressor("gbt").fit(train_matrix, seed=7)
    predictions = regressor.predict(test_matrix)
"""

from .gbt import (
    GBTParams,
    GBTModel,
    HyperSearchResult,
    gbt_train,
    gbt_predict,
    feature_importance,
    random_search,
    write_model,
    read_model,
)
from .gp import GPConfig, GPModel, gp_fit, gp_fit_config, gp_predict, kernel_matrix
from .base import Regressor, GBTRegressor, GPRegressor, make_regressor

__all__ = [
    "GBTParams",
    "GBTModel",
    "HyperSearchResult",
    "gbt_train",
    "gbt_predict",
    "feature_importance",
    "random_search",
    "write_model",
    "read_model",
    "GPConfig",
    "GPModel",
    "gp_fit",
    "gp_fit_config",
    "gp_predict",
    "kernel_matrix",
    "Regressor",
    "GBTRegressor",
    "GPRegressor",
    "make_regressor",
]
