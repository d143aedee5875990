"""Least squares, random forest and gradient-boosted tree regressors.

All three follow the scikit-learn estimator protocol (constructor stores
hyperparameters only, ``fit`` returns ``self``, fitted state ends in ``_``)
and are fully deterministic for a given ``random_state``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ..exceptions import (
    DomainError,
    NotFittedError,
    ShapeError,
    SingularDesignError,
)
from . import _tree

RIDGE_JITTER = 1e-8


def check_features(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, n_features or 0)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D feature matrix, got {X.ndim} dimensions")
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} feature columns, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise DomainError("features contain non-finite values")
    return X


def check_xy(X, y, min_samples: int = 1):
    X = check_features(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] == 0:
        raise DomainError("dataset is empty")
    if y.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    if not np.all(np.isfinite(y)):
        raise DomainError("targets contain non-finite values")
    if X.shape[0] < min_samples:
        raise DomainError(f"need at least {min_samples} samples, got {X.shape[0]}")
    return X, y


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    gain: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _tree.predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = ("feature", "left", "right", "n_samples")
        return cls(**{k: np.asarray(d[k], dtype=np.int64 if k in ints else float) for k in cls.__dataclass_fields__})


def _node_cap(n: int, max_depth: int, min_leaf: int) -> int:
    by_depth = 2 ** min(max_depth + 1, 62) - 1
    by_leaf = 2 * max(n // min_leaf, 1) + 1
    return int(min(by_depth, by_leaf))


def build_tree(X, y, sample_idx, max_depth, min_leaf, n_sub, rng: np.random.Generator | None) -> Tree:
    cap = _node_cap(sample_idx.shape[0], max_depth, min_leaf)
    if rng is None or n_sub >= X.shape[1]:
        keys = np.zeros((cap, X.shape[1]))
    else:
        keys = rng.random((cap, X.shape[1]))
    parts = _tree.grow_tree(X, y, sample_idx.astype(np.int64), max_depth, min_leaf, n_sub, keys)
    return Tree(*parts)


def _tree_rng(seed: int, index: int) -> np.random.Generator:
    # counter-based stream per tree so trees can be grown in any order
    return np.random.Generator(np.random.Philox(key=np.random.SeedSequence([int(seed), index]).generate_state(2)))


class _Fitted:
    kind = ""

    def _check_fitted(self):
        if not hasattr(self, "n_features_in_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")

    def _check_predict_input(self, X):
        self._check_fitted()
        return check_features(X, self.n_features_in_)


class LinearRegressor(_Fitted, RegressorMixin, BaseEstimator):
    """Ordinary least squares with intercept via the normal equations."""

    kind = "linear"

    def __init__(self, jitter: float = RIDGE_JITTER):
        self.jitter = jitter

    def fit(self, X, y):
        X, y = check_xy(X, y, min_samples=2)
        Z = np.hstack([X, np.ones((X.shape[0], 1))])
        G = Z.T @ Z
        b = Z.T @ y
        self.jittered_ = False
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            L = None
        if L is not None and np.min(np.abs(np.diag(L))) ** 2 <= 1e-12 * np.max(np.diag(G)):
            L = None
        if L is None:
            # rank deficient: a small ridge on the Gram matrix picks a stable solution
            lam = self.jitter * max(float(np.max(np.diag(G))), 1.0)
            try:
                L = np.linalg.cholesky(G + lam * np.eye(G.shape[0]))
            except np.linalg.LinAlgError:
                raise SingularDesignError("design matrix is singular even after ridge jitter") from None
            self.jittered_ = True
        coef = np.linalg.solve(L.T, np.linalg.solve(L, b))
        if not np.all(np.isfinite(coef)):
            raise SingularDesignError("least-squares solution is not finite")
        self.coef_ = coef[:-1]
        self.intercept_ = float(coef[-1])
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        X = self._check_predict_input(X)
        return X @ self.coef_ + self.intercept_

    def get_state(self) -> dict:
        return {"coef": self.coef_.tolist(), "intercept": self.intercept_, "jittered": self.jittered_}

    def set_state(self, state: dict, n_features: int):
        self.coef_ = np.asarray(state["coef"], dtype=float)
        self.intercept_ = float(state["intercept"])
        self.jittered_ = bool(state.get("jittered", False))
        self.n_features_in_ = n_features
        return self


class _TreeEnsemble(_Fitted):
    def _importance_from_trees(self) -> np.ndarray:
        self._check_fitted()
        total = np.zeros(self.n_features_in_)
        for tree in self.trees_:
            split = tree.feature >= 0
            np.add.at(total, tree.feature[split], tree.gain[split])
        s = total.sum()
        if s <= 0:
            # no split anywhere, e.g. a constant target
            return np.full(self.n_features_in_, 1.0 / self.n_features_in_)
        return total / s

    @property
    def feature_importances_(self) -> np.ndarray:
        return self._importance_from_trees()

    def get_state(self) -> dict:
        return {"trees": [t.to_dict() for t in self.trees_], **self._extra_state()}

    def _extra_state(self) -> dict:
        return {}


class ForestRegressor(_TreeEnsemble, RegressorMixin, BaseEstimator):
    """Bagged CART regression trees with per-node feature subsampling.

    ``max_features=None`` uses ``ceil(sqrt(n_features))`` candidates per node.
    """

    kind = "forest"

    def __init__(self, n_trees=100, max_depth=8, min_leaf=5, max_features=None, bootstrap=True,
                 random_state=0, n_jobs=1):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        _check_tree_params(self.n_trees, self.max_depth, self.min_leaf)
        X, y = check_xy(X, y, min_samples=self.min_leaf)
        n, p = X.shape
        n_sub = self.max_features or math.ceil(math.sqrt(p))
        if not 1 <= n_sub <= p:
            raise DomainError(f"max_features must lie in [1, {p}]")
        X = np.ascontiguousarray(X)

        def grow(i):
            rng = _tree_rng(self.random_state, i)
            idx = rng.integers(0, n, size=n) if self.bootstrap else np.arange(n)
            return build_tree(X, y, idx, self.max_depth, self.min_leaf, n_sub, rng)

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                self.trees_ = list(pool.map(grow, range(self.n_trees)))
        else:
            self.trees_ = [grow(i) for i in range(self.n_trees)]
        self.n_features_in_ = p
        return self

    def tree_predictions(self, X) -> np.ndarray:
        """``(n_trees, n_samples)`` matrix of individual tree predictions."""
        X = np.ascontiguousarray(self._check_predict_input(X))
        return np.array([t.predict(X) for t in self.trees_]).reshape(len(self.trees_), X.shape[0])

    def predict(self, X):
        return self.tree_predictions(X).mean(axis=0)

    def set_state(self, state: dict, n_features: int):
        self.trees_ = [Tree.from_dict(t) for t in state["trees"]]
        self.n_features_in_ = n_features
        return self


class GBDTRegressor(_TreeEnsemble, RegressorMixin, BaseEstimator):
    """Least-squares gradient boosting: each tree fits the current residuals."""

    kind = "gbdt"

    def __init__(self, n_rounds=200, learning_rate=0.05, max_depth=3, min_leaf=5, random_state=0):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.random_state = random_state

    def fit(self, X, y):
        _check_tree_params(self.n_rounds, self.max_depth, self.min_leaf)
        if not 0.0 < self.learning_rate <= 1.0:
            raise DomainError("learning_rate must lie in (0, 1]")
        X, y = check_xy(X, y, min_samples=self.min_leaf)
        X = np.ascontiguousarray(X)
        n, p = X.shape
        self.init_ = float(y.mean())
        pred = np.full(n, self.init_)
        idx = np.arange(n)
        self.trees_ = []
        self.train_loss_ = [float(np.mean((y - pred) ** 2))]
        for _ in range(self.n_rounds):
            tree = build_tree(X, y - pred, idx, self.max_depth, self.min_leaf, p, None)
            tree = Tree(tree.feature, tree.threshold, tree.left, tree.right,
                        self.learning_rate * tree.value, tree.n_samples, tree.gain)
            pred = pred + tree.predict(X)
            self.trees_.append(tree)
            self.train_loss_.append(float(np.mean((y - pred) ** 2)))
        self.n_features_in_ = p
        return self

    def predict(self, X):
        X = np.ascontiguousarray(self._check_predict_input(X))
        out = np.full(X.shape[0], self.init_)
        for t in self.trees_:
            out += t.predict(X)
        return out

    def _extra_state(self) -> dict:
        return {"init": self.init_}

    def set_state(self, state: dict, n_features: int):
        self.trees_ = [Tree.from_dict(t) for t in state["trees"]]
        self.init_ = float(state["init"])
        self.n_features_in_ = n_features
        return self


def _check_tree_params(n_trees, max_depth, min_leaf):
    for name, value in (("number of trees", n_trees), ("max_depth", max_depth), ("min_leaf", min_leaf)):
        if int(value) < 1:
            raise DomainError(f"{name} must be >= 1")
