"""Kind-based construction, inspection and JSON persistence of regressors."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ..exceptions import DomainError, ShapeError, UnsupportedKindError
from .estimators import (
    ForestRegressor,
    GBDTRegressor,
    LinearRegressor,
    check_features,
    check_xy,
)

MODEL_FMT = 1
KINDS = ("linear", "forest", "gbdt")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        X, y = check_xy(self.features, self.targets)
        names = tuple(self.feature_names)
        if len(names) != X.shape[1]:
            raise ShapeError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 5
    feature_subsample: int | None = None
    bootstrap: bool = True


@dataclass(frozen=True)
class GBDTConfig:
    n_rounds: int = 200
    learning_rate: float = 0.05
    max_depth: int = 3
    min_leaf: int = 5


@dataclass(frozen=True)
class LearnerConfig:
    forest: ForestConfig = field(default_factory=ForestConfig)
    gbdt: GBDTConfig = field(default_factory=GBDTConfig)
    seed: int = 0
    n_jobs: int = 1


def make_estimator(kind: str, config: LearnerConfig = LearnerConfig()):
    if kind == "linear":
        return LinearRegressor()
    if kind == "forest":
        f = config.forest
        return ForestRegressor(f.n_trees, f.max_depth, f.min_leaf, f.feature_subsample, f.bootstrap,
                               random_state=config.seed, n_jobs=config.n_jobs)
    if kind == "gbdt":
        g = config.gbdt
        return GBDTRegressor(g.n_rounds, g.learning_rate, g.max_depth, g.min_leaf, random_state=config.seed)
    raise UnsupportedKindError(f"unknown learner kind {kind!r}; expected one of {KINDS}")


def fit_model(kind: str, dataset: Dataset, config: LearnerConfig = LearnerConfig()):
    """Fit a regressor of ``kind`` and attach the dataset's feature names."""
    model = make_estimator(kind, config).fit(dataset.features, dataset.targets)
    model.feature_names_ = dataset.feature_names
    return model


def feature_importance(model) -> np.ndarray:
    """Normalised total squared-error reduction per feature of a tree model."""
    if getattr(model, "kind", None) not in ("forest", "gbdt"):
        raise UnsupportedKindError("feature importance is defined for tree models only")
    return model.feature_importances_


def partial_dependence(model, data, feature: int, grid):
    """Mean prediction over the rows of ``data`` with ``feature`` forced to each grid value.

    ``data`` is a :class:`Dataset` or a feature matrix. Returns ``(grid, curve)``.
    """
    X = data.features if isinstance(data, Dataset) else check_features(data)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise DomainError("grid is empty")
    if not 0 <= feature < X.shape[1]:
        raise IndexError(f"feature index {feature} out of range for {X.shape[1]} features")
    n = X.shape[0]
    stacked = np.tile(X, (grid.size, 1))
    stacked[:, feature] = np.repeat(grid, n)
    curve = model.predict(stacked).reshape(grid.size, n).mean(axis=1)
    return grid, curve


def default_grid(values, n_points: int = 20) -> np.ndarray:
    """Evenly spaced quantiles of ``values`` with duplicates removed."""
    return np.unique(np.quantile(np.asarray(values, dtype=float), np.linspace(0.0, 1.0, n_points)))


class AffectProbabilityModel(RegressorMixin, BaseEstimator):
    """Regressor of placebo p-values; predictions are clamped to [0, 1].

    The affectedness score of a cell is ``1 - p_hat``.
    """

    def __init__(self, kind="forest", config: LearnerConfig | None = None):
        self.kind = kind
        self.config = config

    def fit(self, X, p_values, feature_names=None):
        X, p = check_xy(X, p_values)
        if np.any(p < 0.0) or np.any(p >= 1.0):
            raise DomainError("p-values must lie in [0, 1)")
        self.model_ = make_estimator(self.kind, self.config or LearnerConfig()).fit(X, p)
        self.feature_names_ = tuple(feature_names) if feature_names is not None else None
        self.n_features_in_ = X.shape[1]
        return self

    def raw_predict(self, X):
        return self.model_.predict(X)

    def predict(self, X):
        return np.clip(self.raw_predict(X), 0.0, 1.0)

    def affectedness(self, X):
        return 1.0 - self.predict(X)


def fit_affect_probability(features, p_values, config: LearnerConfig = LearnerConfig(), kind="forest",
                           feature_names=None) -> AffectProbabilityModel:
    return AffectProbabilityModel(kind, config).fit(features, p_values, feature_names)


# ------------------------------------------------------------ persistence


def model_to_dict(model) -> dict:
    if isinstance(model, AffectProbabilityModel):
        inner = model_to_dict(model.model_)
        return {"model_fmt": MODEL_FMT, "kind": "affect_probability", "base": inner,
                "feature_names": list(model.feature_names_ or [])}
    kind = getattr(model, "kind", None)
    if kind not in KINDS:
        raise UnsupportedKindError(f"cannot serialise {type(model).__name__}")
    model._check_fitted()
    params = {k: v for k, v in model.get_params().items() if k != "n_jobs"}
    return {
        "model_fmt": MODEL_FMT,
        "kind": kind,
        "params": params,
        "n_features": int(model.n_features_in_),
        "feature_names": list(getattr(model, "feature_names_", None) or []),
        "state": model.get_state(),
    }


def model_from_dict(d: dict):
    if d.get("model_fmt") != MODEL_FMT:
        raise DomainError(f"unsupported model_fmt {d.get('model_fmt')!r}")
    kind = d.get("kind")
    if kind == "affect_probability":
        base = model_from_dict(d["base"])
        m = AffectProbabilityModel(base.kind, None)
        m.model_ = base
        m.feature_names_ = tuple(d["feature_names"]) or None
        m.n_features_in_ = base.n_features_in_
        return m
    cls = {"linear": LinearRegressor, "forest": ForestRegressor, "gbdt": GBDTRegressor}.get(kind)
    if cls is None:
        raise UnsupportedKindError(f"unknown model kind {kind!r}")
    model = cls(**d["params"]).set_state(d["state"], int(d["n_features"]))
    model.feature_names_ = tuple(d["feature_names"]) or None
    return model


def dumps_model(model) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))


def loads_model(text: str):
    return model_from_dict(json.loads(text))


def learner_config_from_dict(d: dict) -> LearnerConfig:
    d = dict(d)
    forest = ForestConfig(**d.pop("forest", {}))
    gbdt = GBDTConfig(**d.pop("gbdt", {}))
    cfg = LearnerConfig(forest=forest, gbdt=gbdt, **d)
    for name, value in (("forest.n_trees", forest.n_trees), ("forest.max_depth", forest.max_depth),
                        ("forest.min_leaf", forest.min_leaf), ("gbdt.n_rounds", gbdt.n_rounds),
                        ("gbdt.max_depth", gbdt.max_depth), ("gbdt.min_leaf", gbdt.min_leaf)):
        if value < 1:
            raise DomainError(f"{name} must be >= 1")
    if not 0.0 < gbdt.learning_rate <= 1.0 or not math.isfinite(gbdt.learning_rate):
        raise DomainError("gbdt.learning_rate must lie in (0, 1]")
    return cfg


def learner_config_to_dict(cfg: LearnerConfig) -> dict:
    return asdict(cfg)
