"""Two-stage incident-aware OD flow prediction.

Stage one forecasts flows as if nothing happened (the normal model). Stage
two adds a predicted incident effect, but only to cells the affectedness
model considers likely to be affected: a cell is adjusted when its
predicted placebo p-value is at most ``p2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .effect_features import FEATURE_NAMES, build_training_table, feature_matrix
from .exceptions import (
    DegenerateThresholdError,
    DomainError,
    EmptyEvaluationError,
    EmptyTrainingSetError,
    ShapeError,
)
from .learners import AffectProbabilityModel, Dataset, LearnerConfig, fit_affect_probability, fit_model
from .network import StationGraph
from .panel_io import CausalEffectEstimate, IncidentRecord, ODPanel

NORMAL_FEATURES = ("lag1", "lag2", "interval", "is_weekend", "is_sunny", "od_mean")


@dataclass(frozen=True)
class PipelineConfig:
    p1: float = 0.05
    p2: float = 0.05
    alpha: float = 0.05
    normal_kind: str = "forest"
    effect_kind: str = "forest"
    prob_kind: str = "forest"
    learner_config: LearnerConfig = field(default_factory=LearnerConfig)
    post_incident_window_min: float = 180.0
    n_folds: int = 4

    def __post_init__(self):
        if not 0.0 <= self.p1 <= 1.0:
            raise DomainError("p1 must lie in [0, 1]")
        if not 0.0 <= self.p2 <= 1.0:
            raise DomainError("p2 must lie in [0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if self.n_folds < 2:
            raise DomainError("n_folds must be >= 2")

    @property
    def P(self) -> float:
        return 1.0 - self.p2


@dataclass(frozen=True)
class TheoremInputs:
    e_f2: float
    e_fhat2: float
    e_sq_err: float

    def __post_init__(self):
        for name in ("e_f2", "e_fhat2", "e_sq_err"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and >= 0")
        bound = self.e_f2 + self.e_fhat2 + 2.0 * math.sqrt(self.e_f2 * self.e_fhat2)
        if self.e_sq_err > bound * (1 + 1e-12) + 1e-15:
            raise DomainError("e_sq_err exceeds the Cauchy-Schwarz bound")

    @property
    def curvature(self) -> float:
        return self.e_f2 + self.e_fhat2 - self.e_sq_err


def optimal_threshold(inputs: TheoremInputs) -> float:
    """Risk-minimising affectedness threshold ``P``, clamped to [0, 1]."""
    denom = inputs.curvature
    if denom <= 1e-12:
        raise DegenerateThresholdError(f"risk curvature {denom!r} is not positive")
    return min(max(inputs.e_fhat2 / denom, 0.0), 1.0)


# ------------------------------------------------------------ normal model


def _normal_rows(panel: ODPanel, days, od_mean: np.ndarray):
    flags = panel.day_flags()
    rows, targets = [], []
    k = np.arange(2, panel.n_intervals)
    for od in range(panel.n_od):
        for day in days:
            f = panel.flows[od, day].astype(float)
            block = np.column_stack([
                f[k - 1], f[k - 2], k.astype(float),
                np.full(k.size, flags[day, 1]), np.full(k.size, flags[day, 0]),
                np.full(k.size, od_mean[od]),
            ])
            rows.append(block)
            targets.append(f[k])
    return np.vstack(rows), np.concatenate(targets)


@dataclass
class NormalFlowModel:
    """Per-cell regressor of flow on its two lags, time of day and day flags."""

    model: object
    od_mean: np.ndarray
    training_days: tuple[int, ...]

    def features(self, panel: ODPanel, od: int, day: int, interval: int, lag1: float, lag2: float):
        flags = panel.day_flags()[day]
        return np.array([lag1, lag2, float(interval), flags[1], flags[0], self.od_mean[od]])

    def predict_one_step(self, panel: ODPanel, day: int) -> np.ndarray:
        """``(n_od, n_intervals - 2)`` predictions for intervals 2.. using observed lags."""
        X, _ = _normal_rows(panel, [day], self.od_mean)
        return self.model.predict(X).reshape(panel.n_od, panel.n_intervals - 2)

    def predict_windows(self, panel: ODPanel, day: int, intervals, start: int) -> np.ndarray:
        """Predictions for ``intervals`` (ascending) of every OD, shape ``(n_od, len(intervals))``.

        Lags before ``start`` are observed; later lags are the model's own
        predictions, so flows disturbed after ``start`` never feed back in.
        """
        intervals = list(intervals)
        if start < 2 or (intervals and intervals[0] < start):
            raise DomainError("window must start at or after an interval with two observed lags")
        n = panel.n_od
        path = np.zeros((n, max(intervals[-1] + 1 if intervals else start, start)))
        path[:, :start] = panel.flows[:, day, :start]
        flags = panel.day_flags()[day]
        for k in range(start, path.shape[1]):
            X = np.column_stack([
                path[:, k - 1], path[:, k - 2], np.full(n, float(k)),
                np.full(n, flags[1]), np.full(n, flags[0]), self.od_mean,
            ])
            path[:, k] = np.maximum(self.model.predict(X), 0.0)
        return path[:, intervals]


def train_normal(
    panel: ODPanel,
    incidents: list[IncidentRecord],
    kind: str = "forest",
    config: LearnerConfig = LearnerConfig(),
    days=None,
) -> NormalFlowModel:
    """Fit the normal model on incident-free days only (``days`` restricts further)."""
    busy = {inc.day_index for inc in incidents}
    clean = [d for d in range(panel.n_days) if d not in busy and (days is None or d in set(days))]
    if len(clean) < 7:
        raise EmptyTrainingSetError(f"normal model needs >= 7 incident-free days, got {len(clean)}")
    if panel.n_intervals < 3:
        raise EmptyTrainingSetError("panel has no interval with two lags")
    od_mean = panel.flows[:, clean, :].mean(axis=(1, 2)).astype(float)
    X, y = _normal_rows(panel, clean, od_mean)
    model = fit_model(kind, Dataset(X, y, NORMAL_FEATURES), config)
    return NormalFlowModel(model, od_mean, tuple(clean))


# -------------------------------------------------------------- prediction


@dataclass(frozen=True)
class PredictionRow:
    od: int
    day: int
    interval: int
    normal: float
    adjustment: float
    final: float
    truth: float
    p_hat: float
    gated: bool


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    mape: float

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape}


@dataclass(frozen=True)
class PredictionReport:
    rows: list[PredictionRow]
    metrics_all: Metrics | None
    metrics_influenced: Metrics | None
    n_adjusted: int


@dataclass
class TrainedModels:
    normal: NormalFlowModel
    effect: object
    prob: AffectProbabilityModel


def train_models(
    panel: ODPanel,
    incidents: list[IncidentRecord],
    estimates: list[CausalEffectEstimate],
    graph: StationGraph,
    config: PipelineConfig,
    normal: NormalFlowModel | None = None,
) -> TrainedModels:
    """Normal model on clean days, effect model on p <= p1 rows, p-value model on all rows."""
    if normal is None:
        normal = train_normal(panel, incidents, config.normal_kind, config.learner_config)
    effect_table, p_table = build_training_table(estimates, incidents, graph, panel, config.p1)
    effect = fit_model(config.effect_kind, _min_rows(effect_table, config), config.learner_config)
    prob = fit_affect_probability(p_table.features, p_table.targets, config.learner_config,
                                  kind=config.prob_kind, feature_names=FEATURE_NAMES)
    return TrainedModels(normal, effect, prob)


def _min_rows(table: Dataset, config: PipelineConfig) -> Dataset:
    need = {"linear": 2, "forest": config.learner_config.forest.min_leaf,
            "gbdt": config.learner_config.gbdt.min_leaf}[config.effect_kind]
    if table.n_samples < need:
        raise EmptyTrainingSetError(f"{table.n_samples} effect rows, {config.effect_kind} needs {need}")
    return table


def predict_with_incident(
    panel: ODPanel,
    incident: IncidentRecord,
    models: TrainedModels,
    graph: StationGraph,
    config: PipelineConfig,
    ods=None,
    incidents: list[IncidentRecord] | None = None,
    influenced=None,
) -> PredictionReport:
    """Gated two-stage predictions over the incident window.

    ``panel`` supplies the observed flows before the incident (and the
    truth for evaluation). ``influenced`` is an optional set of
    ``(od, interval)`` cells used for the influenced-cell metrics.
    """
    ods = list(range(panel.n_od)) if ods is None else list(ods)
    window = incident.window_intervals(panel.n_intervals, config.post_incident_window_min)
    if not window:
        raise DomainError("incident window is empty")
    start = incident.start_interval
    day = incident.day_index
    normal_all = models.normal.predict_windows(panel, day, window, start)
    cells = [CausalEffectEstimate(od, day, k, math.nan, math.nan, math.nan) for od in ods for k in window]
    x0 = np.array([normal_all[od, j] for od in ods for j in range(len(window))])
    X, kept = feature_matrix(cells, incidents or [incident], graph, panel, x0=x0)
    if X.shape[1] != models.prob.n_features_in_ or X.shape[1] != models.effect.n_features_in_:
        raise ShapeError("feature schema does not match the trained models")
    p_hat = np.full(len(cells), 1.0)
    adj_raw = np.zeros(len(cells))
    if kept:
        p_hat[kept] = models.prob.predict(X)
        gate = p_hat[kept] <= config.p2
        if gate.any():
            adj_raw[np.asarray(kept)[gate]] = models.effect.predict(X[gate])
    gated = np.zeros(len(cells), dtype=bool)
    if kept:
        gated[kept] = p_hat[kept] <= config.p2
    rows = []
    for i, c in enumerate(cells):
        normal = float(x0[i])
        final = max(normal + adj_raw[i], 0.0) if gated[i] else normal
        rows.append(PredictionRow(c.od, day, c.interval, normal, final - normal, final,
                                  float(panel.flows[c.od, day, c.interval]), float(p_hat[i]), bool(gated[i])))
    return _report(rows, influenced)


def _report(rows, influenced) -> PredictionReport:
    try:
        m_all = evaluate(rows)
    except EmptyEvaluationError:
        m_all = None
    m_inf = None
    if influenced is not None:
        sub = [r for r in rows if (r.od, r.interval) in influenced or (r.od, r.day, r.interval) in influenced]
        try:
            m_inf = evaluate(sub)
        except EmptyEvaluationError:
            m_inf = None
    return PredictionReport(rows, m_all, m_inf, sum(r.gated for r in rows))


def evaluate(rows, field_pred: str = "final") -> Metrics:
    """MAE, RMSE and MAPE over rows whose true flow is at least 2.

    ``rows`` holds objects with ``truth`` and a prediction attribute, or
    ``(prediction, truth)`` pairs.
    """
    pred, truth = [], []
    for r in rows:
        if isinstance(r, tuple):
            p, t = r
        else:
            p, t = getattr(r, field_pred), r.truth
        if t is None or not math.isfinite(t) or t < 2:
            continue
        pred.append(p)
        truth.append(t)
    if not truth:
        raise EmptyEvaluationError("no rows with true flow >= 2")
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    err = pred - truth
    return Metrics(
        mae=math.fsum(np.abs(err)) / err.size,
        rmse=math.sqrt(math.fsum(err * err) / err.size),
        mape=math.fsum(np.abs(err) / truth) / err.size,
    )


# ------------------------------------------------------------- experiments


def incident_folds(incidents, n_folds: int):
    """Contiguous folds of incidents ordered by (day, start); each fold is a test set once."""
    ordered = sorted(incidents, key=lambda i: (i.day_index, i.start_min, i.incident_id))
    if len(ordered) < 2:
        raise DomainError("need at least two incidents for train/test folds")
    k = min(max(int(n_folds), 2), len(ordered))
    bounds = np.linspace(0, len(ordered), k + 1).round().astype(int)
    folds = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        test = ordered[a:b]
        folds.append((ordered[:a] + ordered[b:], test))
    return folds


@dataclass
class Experiment:
    """Cached inputs shared by every threshold setting.

    Incidents are split into folds; every fold's incidents are predicted by
    models trained on the other folds' placebo estimates. The normal model
    uses incident-free days only, so it is shared by all folds.
    """

    panel: ODPanel
    graph: StationGraph
    incidents: list[IncidentRecord]
    estimates: list[CausalEffectEstimate]
    folds: list
    normal: NormalFlowModel

    @classmethod
    def prepare(cls, panel, graph, incidents, estimates, config: PipelineConfig) -> "Experiment":
        folds = incident_folds(incidents, config.n_folds)
        normal = train_normal(panel, incidents, config.normal_kind, config.learner_config)
        return cls(panel, graph, list(incidents), list(estimates), folds, normal)

    def estimates_for(self, incidents):
        days = {i.day_index for i in incidents}
        return [e for e in self.estimates if e.day in days]

    def influenced(self, alpha: float) -> set:
        return {(e.od, e.day, e.interval) for e in self.estimates if e.p_value <= alpha}

    def fold_models(self, config: PipelineConfig) -> list[TrainedModels]:
        return [
            train_models(self.panel, self.incidents, self.estimates_for(train), self.graph, config, self.normal)
            for train, _ in self.folds
        ]

    def predict(self, config: PipelineConfig, models: list[TrainedModels] | None = None):
        """Reports for every incident, each predicted by its fold's models."""
        if models is None:
            models = self.fold_models(config)
        reports = []
        for (_, test), m in zip(self.folds, models):
            for inc in test:
                reports.append(predict_with_incident(self.panel, inc, m, self.graph, config, incidents=self.incidents))
        return models, reports

    def score(self, config: PipelineConfig, reports) -> dict:
        rows = [r for rep in reports for r in rep.rows]
        inf = self.influenced(config.alpha)
        two = _report(rows, inf)
        base_rows = [replace(r, final=r.normal, adjustment=0.0, gated=False) for r in rows]
        base = _report(base_rows, inf)
        return {"two_stage": two, "normal_only": base, "rows": rows}


def _metric(m: Metrics | None, name: str) -> float:
    return getattr(m, name) if m is not None else math.nan


def sweep_thresholds(
    experiment: Experiment,
    grid_p1,
    grid_p2,
    config: PipelineConfig,
) -> list[dict]:
    """Error table over the Cartesian product of ``grid_p1`` and ``grid_p2``.

    The effect models are retrained per p1 value; the affectedness models
    depend on neither threshold and are trained once per fold.
    """
    grid_p1, grid_p2 = list(grid_p1), list(grid_p2)
    if not grid_p1 or not grid_p2:
        raise DomainError("threshold grids must be nonempty")
    ex = experiment
    probs = []
    for train, _ in ex.folds:
        _, p_table = build_training_table(ex.estimates_for(train), ex.incidents, ex.graph, ex.panel, 1.0)
        probs.append(fit_affect_probability(p_table.features, p_table.targets, config.learner_config,
                                            kind=config.prob_kind, feature_names=FEATURE_NAMES))
    out = []
    for p1 in grid_p1:
        cfg1 = replace(config, p1=p1)
        models = []
        for (train, _), prob in zip(ex.folds, probs):
            effect_table, _ = build_training_table(ex.estimates_for(train), ex.incidents, ex.graph, ex.panel, p1)
            effect = fit_model(cfg1.effect_kind, _min_rows(effect_table, cfg1), cfg1.learner_config)
            models.append(TrainedModels(ex.normal, effect, prob))
        for p2 in grid_p2:
            cfg = replace(cfg1, p2=p2)
            _, reports = ex.predict(cfg, models)
            s = ex.score(cfg, reports)["two_stage"]
            out.append({
                "p1": p1, "p2": p2,
                "mae_all": _metric(s.metrics_all, "mae"),
                "mae_influenced": _metric(s.metrics_influenced, "mae"),
                "rmse_all": _metric(s.metrics_all, "rmse"),
                "rmse_influenced": _metric(s.metrics_influenced, "rmse"),
                "n_adjusted": s.n_adjusted,
            })
    return out
