"""Monte Carlo checks of the sample-selection and adjustment-threshold results.

Two closed forms are checked against simulation:

* least squares on a mixture of pure-noise and signal samples, where a
  fraction ``p`` of labels carry ``beta @ x``; the expected squared
  parameter error is ``(1-p)^2 |beta|^2 + (d / sigma_x^2)(sigma1^2 + p sigma2^2) / n``;
* the risk of adjusting a prediction only when an affectedness probability
  exceeds ``P``, which is quadratic in ``P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import DomainError
from .pipeline import TheoremInputs


@dataclass(frozen=True)
class NoisyLinearSpec:
    beta: tuple[float, ...] = (1.0, 1.0)
    p: float = 0.5
    sigma1: float = 1.0
    sigma2: float = 1.0
    sigma_x: float = 1.0
    n: int = 1000
    trials: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in np.atleast_1d(self.beta)))
        d = len(self.beta)
        if d < 1:
            raise DomainError("beta must have at least one entry")
        if not 0.0 <= self.p <= 1.0:
            raise DomainError("p must lie in [0, 1]")
        if self.sigma1 < 0 or self.sigma2 < 0 or not self.sigma_x > 0:
            raise DomainError("noise scales must be >= 0 and sigma_x > 0")
        if self.n <= d + 1:
            raise DomainError("n must exceed d + 1")
        if self.trials < 1:
            raise DomainError("trials must be >= 1")

    @property
    def d(self) -> int:
        return len(self.beta)


@dataclass(frozen=True)
class ParamLossResult:
    loss: float
    resampled: int


def closed_form_param_loss(spec: NoisyLinearSpec, squared_bias: bool = True) -> float:
    """Bias plus large-sample variance of the least-squares estimate.

    ``squared_bias=False`` evaluates the variant whose bias term is
    ``(1-p) |beta|^2`` instead of ``(1-p)^2 |beta|^2``.
    """
    b2 = math.fsum(b * b for b in spec.beta)
    shrink = (1.0 - spec.p) ** 2 if squared_bias else (1.0 - spec.p)
    c = spec.d / spec.sigma_x**2
    return shrink * b2 + c * (spec.sigma1**2 + spec.p * spec.sigma2**2) / spec.n


def empirical_param_loss(spec: NoisyLinearSpec, detail: bool = False):
    """Mean ``|beta - beta_hat|^2`` over independent trials.

    Each trial draws ``X`` with iid ``N(0, sigma_x^2)`` entries; a label is
    ``eps1`` with probability ``1-p`` and ``eps1 + beta @ x + eps2``
    otherwise. The fit has no intercept. Trials whose design is singular are
    redrawn from the same trial stream and counted.
    """
    beta = np.asarray(spec.beta)
    children = np.random.SeedSequence(spec.seed).spawn(spec.trials)
    losses = []
    resampled = 0
    for child in children:
        rng = np.random.default_rng(child)
        while True:
            X = rng.normal(0.0, spec.sigma_x, size=(spec.n, spec.d))
            signal = rng.random(spec.n) < spec.p
            eps1 = rng.normal(0.0, spec.sigma1, spec.n) if spec.sigma1 > 0 else np.zeros(spec.n)
            eps2 = rng.normal(0.0, spec.sigma2, spec.n) if spec.sigma2 > 0 else np.zeros(spec.n)
            y = eps1 + signal * (X @ beta + eps2)
            G = X.T @ X
            if np.linalg.matrix_rank(G) < spec.d:
                resampled += 1
                continue
            bhat = np.linalg.solve(G, X.T @ y)
            break
        r = beta - bhat
        losses.append(float(r @ r))
    loss = math.fsum(losses) / len(losses)
    return ParamLossResult(loss, resampled) if detail else loss


# ---------------------------------------------------------------- threshold


def _standard_normal(rng, size):
    return rng.standard_normal(size)


@dataclass(frozen=True)
class AdjustmentSpec:
    f: Callable[[np.ndarray], np.ndarray] = np.asarray
    fhat: Callable[[np.ndarray], np.ndarray] = np.asarray
    sigma1: float = 1.0
    sigma2: float = 1.0
    P_grid: tuple[float, ...] = field(default_factory=lambda: tuple(np.round(np.arange(101) * 0.01, 2)))
    draws: int = 1_000_000
    seed: int = 0
    sample_x: Callable = _standard_normal
    chunk: int = 250_000

    def __post_init__(self):
        grid = tuple(float(p) for p in self.P_grid)
        if not grid or min(grid) < 0.0 or max(grid) > 1.0:
            raise DomainError("P_grid must be a nonempty subset of [0, 1]")
        object.__setattr__(self, "P_grid", grid)
        if self.draws < 1:
            raise DomainError("draws must be >= 1")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise DomainError("noise scales must be >= 0")


@dataclass(frozen=True)
class AdjustmentRisk:
    P: np.ndarray
    risk: np.ndarray
    inputs: TheoremInputs
    constant: float


def _draws(spec: AdjustmentSpec):
    # fixed chunking with one child seed per chunk keeps results independent of memory layout
    n_chunks = -(-spec.draws // spec.chunk)
    for i, child in enumerate(np.random.SeedSequence(spec.seed).spawn(n_chunks)):
        size = min(spec.chunk, spec.draws - i * spec.chunk)
        rng = np.random.default_rng(child)
        x = spec.sample_x(rng, size)
        p = rng.random(size)
        e1 = rng.normal(0.0, spec.sigma1, size) if spec.sigma1 > 0 else np.zeros(size)
        e2 = rng.normal(0.0, spec.sigma2, size) if spec.sigma2 > 0 else np.zeros(size)
        coin = rng.random(size) < p
        yield x, p, e1, e2, coin


def empirical_adjustment_risk(spec: AdjustmentSpec) -> AdjustmentRisk:
    """Mean squared error of ``fhat(x) * [p_i > P]`` against ``y`` for every grid ``P``.

    ``y = eps1 + coin * (f(x) + eps2)`` with ``coin ~ Bernoulli(p_i)`` and
    ``p_i ~ U[0, 1]``. Also returns the moments of ``f`` and ``fhat`` from
    the same draws and the implied constant term.
    """
    grid = np.asarray(spec.P_grid)
    # per-draw loss is (fhat - y)^2 if adjusted, else y^2; bin draws by their
    # position in the grid and accumulate exact (compensated) sums per bin
    nb = grid.size + 1
    adj_bins = [[] for _ in range(nb)]
    raw_bins = [[] for _ in range(nb)]
    m_f2, m_fh2, m_err = [], [], []
    order = np.argsort(grid, kind="mergesort")
    sorted_grid = grid[order]
    for x, p, e1, e2, coin in _draws(spec):
        fx = np.asarray(spec.f(x), dtype=float)
        fh = np.asarray(spec.fhat(x), dtype=float)
        y = e1 + coin * (fx + e2)
        adj = (fh - y) ** 2
        raw = y * y
        # bin b holds draws with sorted_grid[b-1] < p <= sorted_grid[b]
        b = np.searchsorted(sorted_grid, p, side="left")
        adj_sum = np.bincount(b, weights=adj, minlength=nb)
        raw_sum = np.bincount(b, weights=raw, minlength=nb)
        for i in range(nb):
            adj_bins[i].append(adj_sum[i])
            raw_bins[i].append(raw_sum[i])
        m_f2.append(float(np.sum(fx * fx)))
        m_fh2.append(float(np.sum(fh * fh)))
        m_err.append(float(np.sum((fh - fx) ** 2)))
    adj_tot = np.array([math.fsum(v) for v in adj_bins])
    raw_tot = np.array([math.fsum(v) for v in raw_bins])
    n = spec.draws
    # risk at sorted_grid[j]: draws with p > P are adjusted (bins j+1..), others not (bins ..j)
    raw_cum = np.cumsum(raw_tot)
    adj_tail = np.cumsum(adj_tot[::-1])[::-1]
    risk_sorted = np.array([(raw_cum[j] + adj_tail[j + 1]) / n for j in range(grid.size)])
    risk = np.empty(grid.size)
    risk[order] = risk_sorted
    inputs = TheoremInputs(math.fsum(m_f2) / n, math.fsum(m_fh2) / n, math.fsum(m_err) / n)
    return AdjustmentRisk(grid, risk, inputs, adjustment_constant(inputs, spec.sigma1, spec.sigma2))


def adjustment_constant(inputs: TheoremInputs, sigma1: float, sigma2: float) -> float:
    """Constant term ``E(fhat^2 + f^2/2 - f fhat) + sigma1^2 + sigma2^2/2``."""
    e_f_fhat = 0.5 * (inputs.e_f2 + inputs.e_fhat2 - inputs.e_sq_err)
    return inputs.e_fhat2 + 0.5 * inputs.e_f2 - e_f_fhat + sigma1**2 + 0.5 * sigma2**2


def closed_form_adjustment_risk(inputs: TheoremInputs, P, constant: float = 0.0):
    """``P^2 (e_f2 + e_fhat2 - e_sq_err) / 2 - P e_fhat2 + constant``."""
    P = np.asarray(P, dtype=float)
    out = 0.5 * P**2 * inputs.curvature - P * inputs.e_fhat2 + constant
    return float(out) if out.ndim == 0 else out


def quadratic_r2(P, risk) -> float:
    """Coefficient of determination of a least-squares quadratic fit."""
    P = np.asarray(P, dtype=float)
    risk = np.asarray(risk, dtype=float)
    coef = np.polyfit(P, risk, 2)
    resid = risk - np.polyval(coef, P)
    ss_tot = float(np.sum((risk - risk.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - float(resid @ resid) / ss_tot


def theorem31_grid(
    ps=(0.25, 0.5, 0.75),
    sigma1s=(0.5, 1.0, 2.0),
    sigma2s=(0.5, 1.0, 2.0),
    beta=(1.0, 1.0),
    sigma_x: float = 1.0,
    n: int = 1000,
    trials: int = 500,
    seed: int = 0,
) -> list[dict]:
    """Empirical loss against both closed-form variants on a parameter grid."""
    rows = []
    for i, (p, s1, s2) in enumerate((p, s1, s2) for p in ps for s1 in sigma1s for s2 in sigma2s):
        spec = NoisyLinearSpec(beta, p, s1, s2, sigma_x, n, trials, seed * 1000 + i)
        res = empirical_param_loss(spec, detail=True)
        sq = closed_form_param_loss(spec, squared_bias=True)
        lin = closed_form_param_loss(spec, squared_bias=False)
        rows.append({
            "p": p, "sigma1": s1, "sigma2": s2, "n": n, "trials": trials,
            "empirical": res.loss, "closed_form": sq, "rel_err": abs(res.loss - sq) / sq,
            "closed_form_linear_bias": lin, "rel_err_linear_bias": abs(res.loss - lin) / lin,
            "resampled": res.resampled,
        })
    return rows


def theorem32_curves(draws: int = 1_000_000, seed: int = 0, sigma1: float = 1.0, sigma2: float = 1.0):
    """Risk curves for an exact model and for a model that halves the effect."""
    cases = {
        "exact": AdjustmentSpec(lambda x: x, lambda x: x, sigma1, sigma2, draws=draws, seed=seed),
        "half": AdjustmentSpec(lambda x: x, lambda x: 0.5 * x, sigma1, sigma2, draws=draws, seed=seed + 1),
    }
    return {name: empirical_adjustment_risk(spec) for name, spec in cases.items()}
