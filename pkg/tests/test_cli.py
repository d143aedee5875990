import hashlib
import json

import pytest

from incidentflow import __version__
from incidentflow.cli import DEFAULTS, load_run_config, main
from incidentflow.exceptions import ConfigError

SMALL = {
    "simgen": {"n_days": 30, "n_od": 12, "n_incidents": 4},
    "learners": {"forest": {"n_trees": 20}},
    "pipeline.n_folds": 2,
}


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    assert "verify-theory" in out and "syncontrol.t_pre" in out and "simgen.n_days = 40" in out
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"incidentflow {__version__}"


def test_usage_errors(tmp_path, capsys):
    assert main(["frobnicate", "--out", str(tmp_path)]) == 2
    assert main([]) == 2
    assert main(["simgen"]) == 2  # --out is required
    assert main(["simgen", "--out", str(tmp_path), "--threads", "0"]) == 2
    capsys.readouterr()
    assert main(["simgen", "--out", str(tmp_path), "--config", str(tmp_path / "missing.json")]) == 2
    assert "missing.json" in capsys.readouterr().err


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"simgen": {"n_dayz": 3}}')
    with pytest.raises(ConfigError, match="n_dayz"):
        load_run_config(bad)
    bad.write_text('{"simgen": {"n_days": "many"}}')
    with pytest.raises(ConfigError):
        load_run_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(bad)
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(bad)
    with pytest.raises(ConfigError):
        load_run_config(None, ["placebo.alpha=1.5"])
    assert main(["simgen", "--out", str(tmp_path / "o"), "--set", "nope=1"]) == 2


def test_precedence_and_nesting(tmp_path):
    nested = tmp_path / "nested.json"
    nested.write_text(json.dumps({"simgen": {"n_days": 21}, "placebo": {"alpha": 0.1}}))
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"simgen.n_days": 21, "placebo.alpha": 0.1}))
    a, b = load_run_config(nested), load_run_config(flat)
    assert a == b
    assert a.sim.n_days == 21 and a.placebo.alpha == 0.1
    c = load_run_config(nested, ["simgen.n_days=28", "seed=5"])
    assert c.sim.n_days == 28 and c.seed == 5 and c.sim.seed == 5
    d = load_run_config()
    assert d.sim.n_days == DEFAULTS["simgen.n_days"]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    data = root / "data"
    common = ["--config", str(cfg)]
    assert main(["simgen", *common, "--out", str(data)]) == 0
    before = digest(data)
    assert main(["estimate", *common, "--data", str(data), "--out", str(data)]) == 0
    after_estimate = digest(data)
    assert main(["train", *common, "--data", str(data), "--out", str(root / "m")]) == 0
    assert main(["predict", *common, "--data", str(data), "--models", str(root / "m" / "models.json"),
                 "--out", str(root / "p")]) == 0
    assert main(["evaluate", *common, "--data", str(data), "--predictions", str(root / "p" / "predictions.csv"),
                 "--out", str(root / "e")]) == 0
    return root, before, after_estimate


def test_chain_outputs(chain):
    root, before, after_estimate = chain
    data = root / "data"
    assert set(before) == {"network.csv", "flows.csv", "meta.csv", "incidents.csv", "ground_truth_effects.csv"}
    assert set(after_estimate) - set(before) == {"effects.csv"}
    # estimate adds a file but rewrites none of its inputs
    assert {k: after_estimate[k] for k in before} == before
    assert digest(data) == after_estimate
    metrics = json.loads((root / "e" / "metrics.json").read_text())
    assert set(metrics) == {"all", "influenced", "n_adjusted"}
    assert set(metrics["all"]) == {"mae", "rmse", "mape"}
    assert metrics["all"]["mae"] >= 0
    header = (root / "p" / "predictions.csv").read_text().splitlines()[0]
    assert header == "od_id,interval_index,normal,adjustment,final,truth"


def test_domain_errors_exit_one(chain, capsys):
    root = chain[0]
    data = root / "data"
    rc = main(["predict", "--data", str(data), "--models", str(root / "m" / "models.json"),
               "--incident", "NOPE", "--out", str(root / "x")])
    assert rc == 1
    assert "NOPE" in capsys.readouterr().err
    junk = root / "junk.json"
    junk.write_text("{}")
    assert main(["predict", "--data", str(data), "--models", str(junk), "--out", str(root / "x")]) == 1
    assert main(["estimate", "--data", str(root / "nowhere"), "--out", str(root / "x")]) == 1


def test_train_with_holdout(chain):
    root = chain[0]
    data = root / "data"
    first = (data / "incidents.csv").read_text().splitlines()[1].split(",")[0]
    cfg = root / "cfg.json"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--holdout", first,
                 "--out", str(root / "h")]) == 0
    doc = json.loads((root / "h" / "models.json").read_text())
    assert doc["models_fmt"] == 1 and set(doc) == {"models_fmt", "normal", "effect", "prob"}
    assert (root / "h" / "models.json").read_bytes() != (root / "m" / "models.json").read_bytes()
