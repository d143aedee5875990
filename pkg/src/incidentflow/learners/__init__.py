"""From-scratch regressors with a shared fit/predict contract."""

from .api import (
    KINDS,
    MODEL_FMT,
    AffectProbabilityModel,
    Dataset,
    ForestConfig,
    GBDTConfig,
    LearnerConfig,
    default_grid,
    dumps_model,
    feature_importance,
    fit_affect_probability,
    fit_model,
    learner_config_from_dict,
    learner_config_to_dict,
    loads_model,
    make_estimator,
    model_from_dict,
    model_to_dict,
    partial_dependence,
)
from .estimators import ForestRegressor, GBDTRegressor, LinearRegressor, Tree

__all__ = [
    "KINDS", "MODEL_FMT", "AffectProbabilityModel", "Dataset", "ForestConfig", "GBDTConfig",
    "LearnerConfig", "default_grid", "dumps_model", "feature_importance", "fit_affect_probability",
    "fit_model", "learner_config_from_dict", "learner_config_to_dict", "loads_model",
    "make_estimator", "model_from_dict", "model_to_dict", "partial_dependence",
    "ForestRegressor", "GBDTRegressor", "LinearRegressor", "Tree",
]
