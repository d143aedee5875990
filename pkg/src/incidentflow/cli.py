"""Command-line entry point: ``incidentflow <subcommand> [options]``.

Every subcommand reads an optional JSON config whose keys are namespaced by
module (``syncontrol.t_pre``, ``learners.forest.n_trees``, ...). Nested
objects are flattened, so ``{"pipeline": {"p1": 0.1}}`` and
``{"pipeline.p1": 0.1}`` are equivalent. ``--set key=value`` overrides the
file and the file overrides the built-in defaults.

Exit codes: 0 success, 1 domain or data error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigError, DomainError, IncidentFlowError
from .learners import ForestConfig, GBDTConfig, LearnerConfig, model_from_dict, model_to_dict
from .network import load_network, save_network
from .panel_io import (
    CausalEffectEstimate,
    atomic_write_text,
    load_effects,
    load_incidents,
    load_panel,
    save_effects,
    save_incidents,
    save_panel,
)
from .pipeline import (
    Experiment,
    NormalFlowModel,
    PipelineConfig,
    TrainedModels,
    evaluate,
    predict_with_incident,
    sweep_thresholds,
    train_models,
)
from .placebo import PlaceboConfig, estimate_all
from .simgen import (
    STANDARD_N_INCIDENTS,
    STANDARD_PROFILE,
    STANDARD_SPEC,
    IncidentProfile,
    SimSpec,
    build_scenario,
    save_ground_truth,
)
from .syncontrol import SynthConfig
from .theory import closed_form_adjustment_risk, theorem31_grid, theorem32_curves

NETWORK_FILE = "network.csv"
FLOWS_FILE = "flows.csv"
META_FILE = "meta.csv"
INCIDENTS_FILE = "incidents.csv"
EFFECTS_FILE = "effects.csv"
GROUND_TRUTH_FILE = "ground_truth_effects.csv"
MODELS_FILE = "models.json"
PREDICTIONS_FILE = "predictions.csv"
METRICS_FILE = "metrics.json"
SWEEP_FILE = "sweep.csv"

PREDICTIONS_HEADER = ("od_id", "interval_index", "normal", "adjustment", "final", "truth")
SWEEP_HEADER = ("p1", "p2", "mae_all", "mae_influenced", "rmse_all", "rmse_influenced")
THEOREM31_HEADER = (
    "p", "sigma1", "sigma2", "n", "trials", "empirical", "closed_form", "rel_err",
    "closed_form_linear_bias", "rel_err_linear_bias",
)
THEOREM32_HEADER = ("case", "P", "empirical_risk", "closed_form_risk")
MODELS_FMT = 1


# ------------------------------------------------------------------ config


def _defaults_of(cls, prefix: str, skip=()) -> dict:
    return {f"{prefix}.{f.name}": getattr(cls(), f.name) for f in fields(cls) if f.name not in skip}


def _default_keys() -> dict:
    d = {"seed": 0}
    d.update(_defaults_of(SynthConfig, "syncontrol", skip=("seed",)))
    d.update(_defaults_of(PlaceboConfig, "placebo"))
    d.update(_defaults_of(PipelineConfig, "pipeline", skip=("learner_config",)))
    d["pipeline.sweep_p1"] = [0.0, 0.02, 0.05, 0.1, 0.3, 1.0]
    d["pipeline.sweep_p2"] = [0.0, 0.05, 0.1, 0.3, 0.6, 1.0]
    d.update(_defaults_of(ForestConfig, "learners.forest"))
    d.update(_defaults_of(GBDTConfig, "learners.gbdt"))
    d.update({f"simgen.{f.name}": getattr(STANDARD_SPEC, f.name) for f in fields(SimSpec) if f.name != "seed"})
    d.update({f"simgen.{f.name}": getattr(STANDARD_PROFILE, f.name) for f in fields(IncidentProfile)})
    d["simgen.n_incidents"] = STANDARD_N_INCIDENTS
    d.update({"theory.n": 1000, "theory.trials": 500, "theory.draws": 1_000_000})
    return d


DEFAULTS = _default_keys()
# keys whose default is None but which take an integer when set
_OPTIONAL_INT = {"learners.forest.feature_subsample", "simgen.n_od"}


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if key in _OPTIONAL_INT:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{key} must be an integer or null")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be true or false")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key} must be a number")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key} must be a string")
    if isinstance(default, list):
        if isinstance(value, list) and value and all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
        ):
            return [float(x) for x in value]
        raise ConfigError(f"{key} must be a nonempty list of numbers")
    raise ConfigError(f"unsupported config key {key}")


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass(frozen=True)
class RunConfig:
    seed: int
    synth: SynthConfig
    placebo: PlaceboConfig
    pipeline: PipelineConfig
    sim: SimSpec
    profile: IncidentProfile
    n_incidents: int
    sweep_p1: tuple
    sweep_p2: tuple
    theory_n: int
    theory_trials: int
    theory_draws: int


def _section(values: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}


def load_run_config(path=None, overrides=(), threads: int = 1) -> RunConfig:
    """Merge defaults, the JSON file at ``path`` and ``key=value`` overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        given = _flatten(data)
    else:
        given = {}
    for text in overrides:
        key, value = _parse_override(text)
        given[key] = value
    unknown = sorted(set(given) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in given.items():
        values[key] = _coerce(key, value)
    seed = values["seed"]
    try:
        learners = _section(values, "learners")
        lc = LearnerConfig(
            forest=ForestConfig(**_section(learners, "forest")),
            gbdt=GBDTConfig(**_section(learners, "gbdt")),
            seed=seed,
            n_jobs=threads,
        )
        pipe = _section(values, "pipeline")
        sweep_p1, sweep_p2 = pipe.pop("sweep_p1"), pipe.pop("sweep_p2")
        sim = _section(values, "simgen")
        n_incidents = sim.pop("n_incidents")
        profile_keys = {f.name for f in fields(IncidentProfile)}
        profile = IncidentProfile(**{k: v for k, v in sim.items() if k in profile_keys})
        spec = SimSpec(seed=seed, **{k: v for k, v in sim.items() if k not in profile_keys})
        cfg = RunConfig(
            seed=seed,
            synth=SynthConfig(seed=seed, **_section(values, "syncontrol")),
            placebo=PlaceboConfig(**_section(values, "placebo")),
            pipeline=PipelineConfig(learner_config=lc, **pipe),
            sim=spec,
            profile=profile,
            n_incidents=n_incidents,
            sweep_p1=tuple(sweep_p1),
            sweep_p2=tuple(sweep_p2),
            theory_n=values["theory.n"],
            theory_trials=values["theory.trials"],
            theory_draws=values["theory.draws"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if n_incidents < 1:
        raise ConfigError("simgen.n_incidents must be >= 1")
    if min(cfg.theory_n, cfg.theory_trials, cfg.theory_draws) < 1:
        raise ConfigError("theory sizes must be >= 1")
    return cfg


# ---------------------------------------------------------------- outputs


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(data_dir):
    d = Path(data_dir)
    panel = load_panel(d / FLOWS_FILE, d / META_FILE)
    incidents = load_incidents(d / INCIDENTS_FILE)
    graph = load_network(d / NETWORK_FILE)
    return panel, incidents, graph


def _effects_path(args) -> Path:
    return Path(args.effects) if args.effects else Path(args.data) / EFFECTS_FILE


def _pick_incident(incidents, incident_id):
    if not incidents:
        raise DomainError("no incidents in the data directory")
    if incident_id is None:
        return max(incidents, key=lambda i: (i.day_index, i.start_min, i.incident_id))
    for inc in incidents:
        if inc.incident_id == incident_id:
            return inc
    raise DomainError(f"unknown incident {incident_id!r}")


# ------------------------------------------------------------ subcommands


def cmd_simgen(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    sc = build_scenario(cfg.sim, cfg.n_incidents, cfg.profile)
    save_network(sc.graph, out / NETWORK_FILE)
    save_panel(sc.panel, out / FLOWS_FILE, out / META_FILE)
    save_incidents(sc.incidents, out / INCIDENTS_FILE)
    save_ground_truth(sc.effects, out / GROUND_TRUTH_FILE)


def cmd_estimate(args, cfg: RunConfig) -> None:
    panel, incidents, _ = _load_data(args.data)
    out = _out_dir(args)
    est = estimate_all(panel, incidents, None, cfg.synth, cfg.placebo, threads=args.threads)
    save_effects(est, out / EFFECTS_FILE)


def _normal_to_dict(normal: NormalFlowModel) -> dict:
    return {
        "model": model_to_dict(normal.model),
        "od_mean": [float(v) for v in normal.od_mean],
        "training_days": list(normal.training_days),
    }


def _normal_from_dict(d: dict) -> NormalFlowModel:
    return NormalFlowModel(model_from_dict(d["model"]), np.asarray(d["od_mean"], dtype=float),
                           tuple(d["training_days"]))


def cmd_train(args, cfg: RunConfig) -> None:
    panel, incidents, graph = _load_data(args.data)
    estimates = load_effects(_effects_path(args))
    held = {_pick_incident(incidents, h).day_index for h in args.holdout or ()}
    estimates = [e for e in estimates if e.day not in held]
    models = train_models(panel, incidents, estimates, graph, cfg.pipeline)
    doc = {
        "models_fmt": MODELS_FMT,
        "normal": _normal_to_dict(models.normal),
        "effect": model_to_dict(models.effect),
        "prob": model_to_dict(models.prob),
    }
    _write_json(_out_dir(args) / MODELS_FILE, doc)


def _load_models(path) -> TrainedModels:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("models_fmt") != MODELS_FMT:
        raise DomainError(f"{path} is not a models file")
    return TrainedModels(_normal_from_dict(doc["normal"]), model_from_dict(doc["effect"]),
                         model_from_dict(doc["prob"]))


def cmd_predict(args, cfg: RunConfig) -> None:
    panel, incidents, graph = _load_data(args.data)
    models = _load_models(args.models)
    inc = _pick_incident(incidents, args.incident)
    rep = predict_with_incident(panel, inc, models, graph, cfg.pipeline, incidents=incidents)
    rows = ((r.od, r.interval, r.normal, r.adjustment, r.final, r.truth) for r in rep.rows)
    _write_csv(_out_dir(args) / PREDICTIONS_FILE, PREDICTIONS_HEADER, rows)


def _read_predictions(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != PREDICTIONS_HEADER:
            raise DomainError(f"{path}: expected header {','.join(PREDICTIONS_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                od, k = int(rec[0]), int(rec[1])
                vals = [float(x) for x in rec[2:6]]
            except (ValueError, IndexError):
                raise DomainError(f"{path}:{lineno}: malformed row") from None
            rows.append((od, k, *vals))
    return rows


def cmd_evaluate(args, cfg: RunConfig) -> None:
    rows = _read_predictions(args.predictions)
    incidents = load_incidents(Path(args.data) / INCIDENTS_FILE)
    inc = _pick_incident(incidents, args.incident)
    alpha = cfg.pipeline.alpha
    estimates = load_effects(_effects_path(args))
    influenced = {(e.od, e.interval) for e in estimates if e.day == inc.day_index and e.p_value <= alpha}

    def metrics(sub):
        try:
            return evaluate([(r[4], r[5]) for r in sub]).to_dict()
        except DomainError:
            return None

    doc = {
        "all": metrics(rows),
        "influenced": metrics([r for r in rows if (r[0], r[1]) in influenced]),
        "n_adjusted": sum(r[3] != 0.0 for r in rows),
    }
    _write_json(_out_dir(args) / METRICS_FILE, doc)


def cmd_sweep(args, cfg: RunConfig) -> None:
    panel, incidents, graph = _load_data(args.data)
    estimates = load_effects(_effects_path(args))
    ex = Experiment.prepare(panel, graph, incidents, estimates, cfg.pipeline)
    table = sweep_thresholds(ex, cfg.sweep_p1, cfg.sweep_p2, cfg.pipeline)
    _write_csv(_out_dir(args) / SWEEP_FILE, SWEEP_HEADER, ([r[k] for k in SWEEP_HEADER] for r in table))


def cmd_verify_theory(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    rows = theorem31_grid(n=cfg.theory_n, trials=cfg.theory_trials, seed=cfg.seed)
    _write_csv(out / "theorem31.csv", THEOREM31_HEADER, ([r[k] for k in THEOREM31_HEADER] for r in rows))
    curves = theorem32_curves(draws=cfg.theory_draws, seed=cfg.seed)
    t32 = []
    for name, c in curves.items():
        closed = closed_form_adjustment_risk(c.inputs, c.P, c.constant)
        t32.extend((name, P, r, cf) for P, r, cf in zip(c.P, c.risk, closed))
    _write_csv(out / "theorem32.csv", THEOREM32_HEADER, t32)


# ------------------------------------------------------------------ parser


def _config_help() -> str:
    lines = ["config keys (defaults):"]
    for key, value in DEFAULTS.items():
        lines.append(f"  {key} = {json.dumps(value)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (value parsed as JSON when possible)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (output does not depend on it)")
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(
        prog="incidentflow",
        description="Incident-aware OD flow prediction with synthetic-control effect estimates.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    add("simgen", cmd_simgen, "generate a synthetic network, panel, incidents and true effects")
    p = add("estimate", cmd_estimate, "estimate incident effects with placebo p-values")
    p.add_argument("--data", required=True, help="directory with network, flows, meta and incidents CSVs")
    p = add("train", cmd_train, "train the normal, effect and affectedness models")
    p.add_argument("--data", required=True)
    p.add_argument("--effects", help="effects CSV (default: DATA/effects.csv)")
    p.add_argument("--holdout", action="append", metavar="INCIDENT_ID",
                   help="exclude this incident's estimates from training (repeatable)")
    p = add("predict", cmd_predict, "two-stage predictions over one incident's window")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="models.json written by train")
    p.add_argument("--incident", help="incident id (default: the latest incident)")
    p = add("evaluate", cmd_evaluate, "MAE/RMSE/MAPE of predictions over all and influenced cells")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--effects", help="effects CSV (default: DATA/effects.csv)")
    p.add_argument("--incident", help="incident id the predictions belong to (default: the latest)")
    p = add("sweep", cmd_sweep, "cross-validated error over the p1 x p2 threshold grid")
    p.add_argument("--data", required=True)
    p.add_argument("--effects", help="effects CSV (default: DATA/effects.csv)")
    add("verify-theory", cmd_verify_theory, "Monte Carlo checks of the two threshold results")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("incidentflow: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_run_config(args.config, args.set, threads=args.threads)
    except ConfigError as exc:
        print(f"incidentflow: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(args, cfg)
    except (IncidentFlowError, ValueError, OSError, KeyError) as exc:
        print(f"incidentflow: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
