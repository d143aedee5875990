"""Synthetic-control counterfactuals for a single OD cell.

A counterfactual flow is a convex combination of the same OD's flow on
incident-free donor days. Donor weights minimise the V-weighted distance
between the donors' covariates and the target day's covariates; the
diagonal V is then chosen so that the resulting weights best reproduce the
target day's flows in the pre-incident intervals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import _sc_kernels
from .exceptions import (
    DomainError,
    InsufficientDonorsError,
    InsufficientHistoryError,
    NotFittedError,
)
from .panel_io import CausalEffectEstimate, IncidentRecord, ODPanel, covariates_at


@dataclass(frozen=True)
class SynthConfig:
    t_pre: int = 2
    inner_max_iter: int = 10_000
    inner_tol: float = 1e-10
    outer_restarts: int = 3
    standardize: bool = True
    anchor_pre_period: bool = True
    outer_maxfev: int = 200
    outer_step: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.t_pre < 1:
            raise DomainError("t_pre must be >= 1")
        if self.inner_max_iter < 1 or self.outer_maxfev < 1:
            raise DomainError("iteration limits must be >= 1")
        if self.outer_restarts < 0:
            raise DomainError("outer_restarts must be >= 0")
        if not (self.inner_tol > 0 and self.outer_step > 0):
            raise DomainError("inner_tol and outer_step must be > 0")


@dataclass(frozen=True)
class DonorSet:
    """Matching inputs for one target cell.

    ``donor_outcomes`` may be 1-D (one outcome interval) or ``(n_donors, m)``
    for several outcome intervals that share the same matching inputs.
    """

    donor_covariates: np.ndarray
    donor_outcomes: np.ndarray
    donor_pre_outcomes: np.ndarray
    target_covariates: np.ndarray
    target_pre_outcomes: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.donor_covariates, dtype=float))
        y = np.asarray(self.donor_outcomes, dtype=float)
        X = np.asarray(self.donor_pre_outcomes, dtype=float)
        a = np.asarray(self.target_covariates, dtype=float).ravel()
        X0 = np.asarray(self.target_pre_outcomes, dtype=float).ravel()
        if A.size == 0 or A.shape[0] < 1:
            raise DomainError("donor set is empty")
        n, d = A.shape
        if X.ndim == 1:
            X = X.reshape(-1, n) if X.size else X.reshape(0, n)
        if a.shape != (d,):
            raise DomainError(f"target covariates have length {a.size}, expected {d}")
        if y.shape[0] != n or X.shape[1] != n or X0.shape != (X.shape[0],):
            raise DomainError("donor set dimensions are inconsistent")
        for name, arr in (("covariates", A), ("outcomes", y), ("pre-outcomes", X),
                          ("target covariates", a), ("target pre-outcomes", X0)):
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"non-finite {name}")
        object.__setattr__(self, "donor_covariates", A)
        object.__setattr__(self, "donor_outcomes", y)
        object.__setattr__(self, "donor_pre_outcomes", X)
        object.__setattr__(self, "target_covariates", a)
        object.__setattr__(self, "target_pre_outcomes", X0)

    @property
    def n_donors(self) -> int:
        return self.donor_covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.donor_covariates.shape[1]

    def standardized(self) -> "DonorSet":
        """Z-score each covariate over the donors; constant columns are only centred."""
        A = self.donor_covariates
        mu = A.mean(axis=0)
        sd = A.std(axis=0)
        sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mu)), sd, 1.0)
        return replace(self, donor_covariates=(A - mu) / sd, target_covariates=(self.target_covariates - mu) / sd)


@dataclass(frozen=True)
class SyntheticFit:
    weights: np.ndarray
    v_diag: np.ndarray
    inner_objective: float
    outer_objective: float
    counterfactual: float | np.ndarray


def _check_v(v_diag, d) -> np.ndarray:
    v = np.asarray(v_diag, dtype=float).ravel()
    if v.shape != (d,):
        raise DomainError(f"v_diag has length {v.size}, expected {d}")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise DomainError("v_diag must be strictly positive and finite")
    return v


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``y`` onto the probability simplex (sort-based)."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, y.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(y - theta, 0.0)


def _solve_pgd(P: np.ndarray, max_iter: int, tol: float):
    # projected gradient on q(w) = |w @ P|^2 with Armijo backtracking
    n = P.shape[0]
    G = P @ P.T
    w = np.full(n, 1.0 / n)
    q = float(w @ G @ w)
    step = 1.0 / max(2.0 * np.linalg.eigvalsh(G)[-1], 1e-300)
    for _ in range(max_iter):
        grad = 2.0 * (G @ w)
        while True:
            w_new = project_simplex(w - step * grad)
            q_new = float(w_new @ G @ w_new)
            diff = w_new - w
            if q_new <= q + grad @ diff + (diff @ diff) / (2.0 * step) + 1e-15:
                break
            step *= 0.5
        improvement = q - q_new
        w, q = w_new, q_new
        if improvement < tol:
            break
    return w, q


def solve_weights(
    donors: DonorSet,
    v_diag,
    *,
    max_iter: int = 10_000,
    tol: float = 1e-10,
    method: str = "active-set",
) -> tuple[np.ndarray, float]:
    """Simplex weights minimising the V-norm covariate mismatch.

    ``method="active-set"`` finds the exact minimum-norm point of the donor
    hull; ``method="pgd"`` runs projected gradient descent, stopping when the
    squared-objective improvement drops below ``tol``. Returns
    ``(weights, objective)`` where the objective is the achieved V-norm.
    """
    v = _check_v(v_diag, donors.n_covariates)
    P = (donors.donor_covariates - donors.target_covariates) * np.sqrt(v)
    if method == "active-set":
        w, q, _ = _sc_kernels.min_norm_weights(np.ascontiguousarray(P), max_iter, tol)
    elif method == "pgd":
        w, q = _solve_pgd(P, max_iter, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    return w, float(np.sqrt(max(q, 0.0)))


def outer_objective(donors: DonorSet, weights: np.ndarray) -> float:
    r = donors.donor_pre_outcomes @ weights - donors.target_pre_outcomes
    return float(np.sqrt(r @ r))


def counterfactual(donors: DonorSet, fit: SyntheticFit | np.ndarray):
    """Weighted donor outcome; scalar for 1-D outcomes, vector otherwise."""
    w = fit.weights if isinstance(fit, SyntheticFit) else np.asarray(fit, dtype=float)
    if w.shape != (donors.n_donors,):
        raise DomainError("weights do not match the donor set")
    y = donors.donor_outcomes
    # clipping only absorbs rounding; the exact value lies in the donor hull
    out = np.clip(w @ y, y.min(axis=0), y.max(axis=0))
    return float(out) if y.ndim == 1 else out


def v_from_logits(z, d: int) -> np.ndarray:
    return _sc_kernels._v_from_logits(np.asarray(z, dtype=float), d)


def optimize_v(
    donors: DonorSet,
    *,
    restarts: int = 3,
    seed: int | np.random.SeedSequence = 0,
    max_iter: int = 10_000,
    tol: float = 1e-10,
    maxfev: int = 200,
    step: float = 0.5,
) -> SyntheticFit:
    """Choose the diagonal V minimising pre-period error of the induced weights.

    Nelder-Mead runs over ``log v`` (with ``sum(v) == d``) from the identity
    and from ``restarts`` random starting points drawn from ``seed``.
    """
    d = donors.n_covariates
    if donors.donor_pre_outcomes.shape[0] < 1:
        raise DomainError("at least one pre-period interval is required")
    rng = np.random.default_rng(seed)
    starts = np.vstack([np.zeros((1, d - 1)), rng.normal(size=(restarts, d - 1))])
    A = np.ascontiguousarray(donors.donor_covariates)
    z, _ = _sc_kernels.optimize_logits(
        starts, A, donors.target_covariates,
        np.ascontiguousarray(donors.donor_pre_outcomes), donors.target_pre_outcomes,
        max_iter, tol, step, maxfev, 1e-4, 1e-10,
    )
    v = v_from_logits(z, d)
    return fit_with_v(donors, v, max_iter=max_iter, tol=tol)


def fit_with_v(donors: DonorSet, v_diag, *, max_iter=10_000, tol=1e-10) -> SyntheticFit:
    w, inner = solve_weights(donors, v_diag, max_iter=max_iter, tol=tol)
    return SyntheticFit(
        weights=w,
        v_diag=np.asarray(v_diag, dtype=float),
        inner_objective=inner,
        outer_objective=outer_objective(donors, w),
        counterfactual=counterfactual(donors, w),
    )


class SyntheticControl(BaseEstimator):
    """Estimator wrapper around :func:`optimize_v`.

    ``fit`` takes a :class:`DonorSet`; ``predict`` returns the counterfactual
    for new donor outcomes under the fitted weights.
    """

    def __init__(self, restarts=3, max_iter=10_000, tol=1e-10, maxfev=200,
                 standardize=True, random_state=0):
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.maxfev = maxfev
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, donors: DonorSet, y=None):
        prepared = donors.standardized() if self.standardize else donors
        self.fit_ = optimize_v(prepared, restarts=self.restarts, seed=self.random_state,
                               max_iter=self.max_iter, tol=self.tol, maxfev=self.maxfev)
        self.weights_ = self.fit_.weights
        self.v_diag_ = self.fit_.v_diag
        return self

    def predict(self, donor_outcomes):
        if not hasattr(self, "weights_"):
            raise NotFittedError("SyntheticControl is not fitted")
        return np.asarray(donor_outcomes, dtype=float).T @ self.weights_


# ------------------------------------------------------------ panel helpers


def reference_interval(incidents, day: int, interval: int, anchor: bool = True) -> int:
    """Interval whose preceding flows serve as matching covariates.

    Cells at or after the start of an incident on ``day`` are matched on the
    flows before that incident began, keeping covariates and pre-period free
    of incident effects.
    """
    if not anchor:
        return interval
    starts = [inc.start_interval for inc in incidents if inc.day_index == day and inc.start_interval <= interval]
    return max(starts) if starts else interval


def clean_days(panel: ODPanel, incidents) -> list[int]:
    busy = {inc.day_index for inc in incidents}
    return [d for d in range(panel.n_days) if d not in busy]


def build_donor_set(
    panel: ODPanel,
    od: int,
    target_day: int,
    donor_days,
    ref: int,
    outcome_intervals,
    t_pre: int = 2,
) -> DonorSet:
    if ref < max(2, t_pre):
        raise InsufficientHistoryError(
            f"reference interval {ref} needs at least max(2, t_pre={t_pre}) earlier intervals"
        )
    donor_days = list(donor_days)
    if not donor_days:
        raise InsufficientDonorsError("donor pool is empty")
    flows = panel.flows[od].astype(float)
    A = np.array([covariates_at(panel, od, day, ref).values for day in donor_days])
    a = covariates_at(panel, od, target_day, ref).values
    X = flows[donor_days, ref - t_pre:ref].T
    X0 = flows[target_day, ref - t_pre:ref]
    if np.ndim(outcome_intervals) == 0:
        y = flows[donor_days, int(outcome_intervals)]
    else:
        y = flows[np.ix_(donor_days, list(outcome_intervals))]
    return DonorSet(A, y, X, a, X0)


def cell_seed(base: int, *parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base), *(int(p) for p in parts)])


def fit_donors(donors: DonorSet, config: SynthConfig, seed) -> SyntheticFit:
    prepared = donors.standardized() if config.standardize else donors
    return optimize_v(
        prepared, restarts=config.outer_restarts, seed=seed,
        max_iter=config.inner_max_iter, tol=config.inner_tol,
        maxfev=config.outer_maxfev, step=config.outer_step,
    )


def estimate_effect(
    panel: ODPanel,
    incidents: list[IncidentRecord],
    od: int,
    day: int,
    interval: int,
    config: SynthConfig = SynthConfig(),
) -> CausalEffectEstimate:
    """Observed minus synthetic counterfactual flow for one cell (no p-value)."""
    if interval < 2:
        raise InsufficientHistoryError(f"interval {interval} has fewer than two lags")
    ref = reference_interval(incidents, day, interval, config.anchor_pre_period)
    donors_days = [d for d in clean_days(panel, incidents) if d != day]
    if not donors_days:
        raise InsufficientDonorsError("no incident-free donor days")
    donors = build_donor_set(panel, od, day, donors_days, ref, interval, config.t_pre)
    fit = fit_donors(donors, config, cell_seed(config.seed, od, day, ref, day))
    observed = float(panel.flows[od, day, interval])
    cf = float(fit.counterfactual)
    return CausalEffectEstimate(od, day, interval, observed, cf, observed - cf)
