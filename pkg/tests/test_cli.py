import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mvsae.cli import main
from mvsae.direct import read_direct_estimates_csv
from mvsae.mcmc import read_samples_csv
from mvsae.survey import load_adjacency

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"
GRAPH = str(DATA / "graph.json")
SHORT = ["--chains", "2", "--warmup", "100", "--draws", "100"]


@pytest.fixture(autouse=True)
def fixed_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


@pytest.fixture
def estimates(tmp_path):
    out = tmp_path / "est"
    assert main(["direct", "--data", str(DATA / "survey.csv"), "--graph", GRAPH, "--out-dir", str(out)]) == 0
    return str(out / "direct_estimates.csv")


def run(*args):
    return main([str(a) for a in args])


def test_direct_matches_golden_file(estimates):
    assert Path(estimates).read_text() == (GOLDEN / "direct_estimates.csv").read_text()
    man = json.loads((Path(estimates).parent / "direct_estimates.manifest.json").read_text())
    assert set(man) == {"command", "inputs", "seed", "version", "timestamp", "lonely_psu", "notes"}
    assert man["timestamp"] == "2023-11-14T22:13:20Z"
    assert set(man["inputs"]) == {"data", "graph"}


def test_direct_lonely_psu_exit_codes(tmp_path, capsys):
    args = ["direct", "--data", DATA / "survey_lonely.csv", "--graph", GRAPH, "--out-dir", tmp_path]
    assert run(*args) == 2
    assert "lonely" in capsys.readouterr().err
    assert run(*args, "--lonely-psu", "centered") == 0


def test_direct_out_flag(tmp_path):
    out = tmp_path / "sub" / "est.csv"
    assert run("direct", "--data", DATA / "survey.csv", "--graph", GRAPH, "--out", out) == 0
    assert out.read_text() == (GOLDEN / "direct_estimates.csv").read_text()
    assert (out.parent / "est.manifest.json").exists()


def test_fit_outputs_parse(tmp_path, estimates):
    out = tmp_path / "fit"
    assert run("fit", "--estimates", estimates, "--graph", GRAPH, "--model", "BivSharedBYM", *SHORT,
               "--out-dir", out) == 0
    summary = pd.read_csv(out / "summary.csv")
    assert list(summary.columns) == ["region", "outcome", "median", "q2.5", "q10", "q90", "q97.5", "status"]
    assert len(summary) == 4 * 2
    assert set(summary["status"]) <= {"HEALTHY", "UNHEALTHY"}
    assert (summary["q2.5"] <= summary["q10"]).all() and (summary["q90"] <= summary["q97.5"]).all()
    smp = read_samples_csv(out / "samples.csv")
    assert smp["mu"].shape == (2, 100, 2, 4)
    assert np.allclose(np.median(smp["mu"].reshape(-1, 2, 4), axis=0).ravel(), summary["median"], rtol=1e-12)
    diag = json.loads((out / "diagnostics.json").read_text())
    assert {"healthy", "parameters", "acceptance", "notes", "rhat_threshold"} <= set(diag)
    man = json.loads((out / "manifest.json").read_text())
    assert man["model"] == "biv_shared_bym" and man["chains"] == 2


def test_fit_unknown_family_file_is_usage_error(tmp_path, estimates, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text('{"level": "area", "family": "car_leroux"}')
    assert run("fit", "--estimates", estimates, "--graph", GRAPH, "--model", spec, "--out-dir", tmp_path) == 4
    assert "family name or a spec JSON" in capsys.readouterr().err


def test_fit_level_and_input_errors(tmp_path, estimates):
    assert run("fit", "--estimates", estimates, "--graph", GRAPH, "--model", "bym_shared") == 4
    assert run("fit", "--data", DATA / "survey.csv", "--graph", GRAPH, "--model", "bym_shared") == 4
    assert run("fit", "--model", "uni_iid") == 4
    with pytest.raises(SystemExit) as err:
        main(["bogus"])
    assert err.value.code == 4


def test_singular_stage1_covariance_is_numerical_failure(tmp_path, estimates):
    est = pd.read_csv(estimates)
    est.loc[1, "V12"] = np.sqrt(est.loc[1, "V11"] * est.loc[1, "V22"])
    bad = tmp_path / "singular.csv"
    est.to_csv(bad, index=False)
    assert run("fit", "--estimates", bad, "--graph", GRAPH, "--model", "biv_shared_iid", *SHORT,
               "--out-dir", tmp_path) == 3


def test_unit_fit_and_aggregate(tmp_path):
    out = tmp_path / "unit"
    q = DATA / "q.json"
    assert run("fit", "--data", DATA / "survey.csv", "--q", q, "--graph", GRAPH, "--model", "bym_shared", *SHORT,
               "--out-dir", out) == 0
    agg = tmp_path / "agg.csv"
    assert run("aggregate", "--samples", out / "samples.csv", "--model", "bym_shared", "--q", q, "--graph", GRAPH,
               "--out", agg) == 0
    # with the same q the aggregation reproduces the fitted area means
    a = pd.read_csv(agg)
    s = pd.read_csv(out / "summary.csv")
    assert list(a.columns) == ["region", "outcome", "median", "q2.5", "q10", "q90", "q97.5"]
    assert np.allclose(a["median"], s["median"], rtol=1e-9)
    q2 = tmp_path / "q2.json"
    q2.write_text('{"q": [0.1, 0.2]}')
    assert run("aggregate", "--samples", out / "samples.csv", "--model", "bym_shared", "--q", q2, "--graph", GRAPH,
               "--out", agg) == 2


def test_loo_outputs(tmp_path, estimates):
    out = tmp_path / "loo"
    assert run("loo", "--estimates", estimates, "--graph", GRAPH, "--models", "uni_iid", "uni_iid",
               "--warmup", 50, "--draws", 50, "--out-dir", out) == 0
    summ = pd.read_csv(out / "logscore_summary.csv")
    assert list(summ.columns) == ["model", "logscore_sum", "logscore_mean"]
    assert summ["logscore_mean"].iloc[0] == summ["logscore_mean"].iloc[1]
    regions = pd.read_csv(out / "logscore_regions.csv")
    assert list(regions.columns) == ["model", "region", "log_lhat"] and len(regions) == 8
    one = tmp_path / "one"
    assert run("loo", "--estimates", estimates, "--graph", GRAPH, "--models", "biv_shared_iid",
               "--warmup", 50, "--draws", 50, "--out-dir", one) == 0
    assert len(pd.read_csv(one / "logscore_summary.csv")) == 1


def test_simulate_outputs_and_errors(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--scenario", "area:1", "--replicates", 2, "--models", "uni_iid", "--graph", GRAPH,
               "--chains", 1, "--warmup", 50, "--draws", 50, "--out-dir", out) == 0
    m = pd.read_csv(out / "metrics.csv")
    assert set(m["outcome"]) == {1, 2}
    assert (m["replicates"] == 2).all()
    assert (out / "archive" / "scenario_1" / "replicate_1" / "truth.csv").exists()
    assert run("simulate", "--scenario", "unit:8", "--out-dir", tmp_path) == 2
    assert run("simulate", "--scenario", "area-6", "--out-dir", tmp_path) == 4
    assert run("simulate", "--out-dir", tmp_path) == 4


def test_simulate_from_config_file(tmp_path):
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({"level": "area", "scenario_id": 9, "replicate_count": 1, "seed": 3}))
    out = tmp_path / "sim"
    assert run("simulate", "--config", cfg, "--models", "direct", "--graph", GRAPH, "--out-dir", out) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["scenario"]["scenario_id"] == 9 and man["seed"] == 3


def test_estimates_file_round_trip(estimates):
    est = read_direct_estimates_csv(estimates, load_adjacency(GRAPH))
    assert est.region_labels == ("north", "east", "south", "west")
    assert est.availability.all()


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "mvsae.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("sae ")
