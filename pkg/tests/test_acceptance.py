"""Exit criteria 1-9. Each test prints one ``CRITERION n: PASS|FAIL`` line.

Select with ``pytest -m acceptance``; skip with ``-m "not acceptance"``.
"""

import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_survey, record_criterion
from oracles import (brute_force_linearization, constrained_variances, grid_posterior_iid, ks_uniform_pvalue,
                     mcse_mean_sd)
from mvsae.cli import main as cli_main
from mvsae.direct import DirectEstimateSet, design_covariance, hajek_mean
from mvsae.evaluation import derived_seed, loo_logscore_area
from mvsae.mcmc import FitConfig, fit
from mvsae.models import AREA_FAMILIES, UNIT_FAMILIES, AreaModelSpec, PriorConfig, UnitModelSpec
from mvsae.simulation import ScenarioConfig, generate_area_scenario, generate_unit_scenario, run_simulation_study
from mvsae.spatial import scaled_icar
from mvsae.survey import AdjacencyGraph, default_geography, lattice_graph

pytestmark = pytest.mark.acceptance

DATA = Path(__file__).parent / "data"
STAGE2 = AREA_FAMILIES[1:]


def test_criterion_1_stage1_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        d = random_survey(rng, R=int(rng.integers(1, 6)), C=2, max_strata=3, max_clusters=4, max_people=10)
        for r in range(d.region_count):
            sel = d.region == r
            mean, V = brute_force_linearization(d.weight[sel], d.outcomes[sel], list(d.stratum[sel]),
                                                list(d.cluster[sel]))
            got = np.array([hajek_mean(d, r, c) for c in range(2)])
            worst = max(worst, np.abs(got - mean).max(), np.abs(design_covariance(d, r) - V).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 10
    record_criterion(1, ok, f"max entrywise error {worst:.2e} (tol 1e-10) over 20 fixtures, {elapsed:.1f}s")
    assert ok


def test_criterion_2_icar_scaling():
    t0 = time.perf_counter()
    graphs = {"path3": AdjacencyGraph.from_pairs(3, [(1, 2), (2, 3)]), "lattice5x5": lattice_graph(5, 5),
              "lattice47": default_geography()}
    devs = {}
    for name, g in graphs.items():
        var = constrained_variances(scaled_icar(g).dense())
        devs[name] = abs(math.exp(np.mean(np.log(var))) - 1.0)
    elapsed = time.perf_counter() - t0
    ok = max(devs.values()) < 1e-8 and elapsed < 10
    detail = ", ".join(f"{k} |gm-1|={v:.1e}" for k, v in devs.items())
    record_criterion(2, ok, f"{detail} (tol 1e-8), {elapsed:.1f}s")
    assert ok


def test_criterion_3_sampler_correctness():
    t0 = time.perf_counter()
    # grid-integrable fixture: three regions on a path, non-shared iid model
    y = np.array([[-0.9, -0.7], [-1.3, -0.95], [-0.6, -0.9]])
    sd = np.array([[0.15, 0.2], [0.25, 0.15], [0.2, 0.3]])
    corr = np.array([0.5, 0.3, 0.7])
    V = np.zeros((3, 2, 2))
    V[:, 0, 0], V[:, 1, 1] = sd[:, 0] ** 2, sd[:, 1] ** 2
    V[:, 0, 1] = V[:, 1, 0] = corr * sd[:, 0] * sd[:, 1]
    g = AdjacencyGraph.from_pairs(3, [(1, 2), (2, 3)])
    ref = grid_posterior_iid(y, V, np.linspace(np.log(1e-4), np.log(4), 140))
    f = fit(AreaModelSpec("biv_nonshared_iid"), DirectEstimateSet(y, V, np.ones((3, 2), bool)), g,
            config=FitConfig(chains=4, warmup=2000, draws=25000, seed=1))
    zmax = 0.0
    for c in range(2):
        for r in range(3):
            m, s, sem, ses = mcse_mean_sd(f.samples["mu"][:, :, c, r])
            zmax = max(zmax, abs(m - ref["mu_mean"][c, r]) / sem, abs(s - ref["mu_sd"][c, r]) / ses)
    # prior recovery
    est0 = DirectEstimateSet(np.zeros((3, 2)), np.tile(np.eye(2) * 0.01, (3, 1, 1)), np.ones((3, 2), bool))
    spec = AreaModelSpec("biv_nonshared_bym", priors=PriorConfig(fixed_effect_prior="gaussian"))
    p = fit(spec, est0, g, config=FitConfig(chains=4, warmup=1000, draws=40000, seed=2, likelihood=False,
                                            store=("sigma", "rho")))
    tail = float((p.samples["sigma"] > 1).mean())
    thin = p.samples["rho"][:, ::40].reshape(-1, 2)
    ks = [ks_uniform_pvalue(thin[:, c]) for c in range(2)]
    elapsed = time.perf_counter() - t0
    ok = zmax < 3 and abs(tail - 0.01) <= 0.005 and min(ks) > 0.01 and elapsed < 300
    record_criterion(3, ok, f"max |z| of mu mean/sd vs quadrature {zmax:.2f} (tol 3 MCSE), P(sigma>1)={tail:.4f} "
                            f"(0.01+-0.005), KS p={ks[0]:.3f},{ks[1]:.3f} (>0.01), {elapsed:.0f}s")
    assert ok


def _outcome_mean(metrics, model, name):
    return float(np.mean([metrics.get(model, c, name) for c in (1, 2)]))


def test_criterion_4_area_scenario6():
    t0 = time.perf_counter()
    cfg = ScenarioConfig("area", 6, replicate_count=100, seed=2024)
    res = run_simulation_study(cfg, AREA_FAMILIES)
    m = res.metrics
    var = {f: _outcome_mean(m, f, "variance") for f in AREA_FAMILIES}
    mse = {f: _outcome_mean(m, f, "mse") for f in AREA_FAMILIES}
    cov = {f: _outcome_mean(m, f, "coverage") for f in AREA_FAMILIES}
    a = max(var, key=var.get) == "direct" and max(mse, key=mse.get) == "direct"
    b = 0.90 <= cov["biv_shared_bym"] <= 0.98
    c = max(cov["biv_nonshared_iid"], cov["biv_nonshared_bym"]) < min(cov["biv_shared_iid"], cov["biv_shared_bym"])
    elapsed = time.perf_counter() - t0
    for f in AREA_FAMILIES:
        per = [(m.get(f, k, "variance"), m.get(f, k, "mse"), m.get(f, k, "coverage")) for k in (1, 2)]
        print(f"  {f:18s} var {var[f]:.5f} mse {mse[f]:.5f} cov {cov[f]:.3f} | per outcome "
              + " ".join(f"({v:.5f},{s:.5f},{cv:.3f})" for v, s, cv in per))
    failures = {k: v for k, v in res.failures.items() if v}
    ok = a and b and c
    record_criterion(4, ok, f"(a) direct max var+mse: {a}; (b) shared BYM coverage {cov['biv_shared_bym']:.3f} "
                            f"in [0.90,0.98]: {b}; (c) non-shared coverage "
                            f"{cov['biv_nonshared_iid']:.3f}/{cov['biv_nonshared_bym']:.3f} < shared "
                            f"{cov['biv_shared_iid']:.3f}/{cov['biv_shared_bym']:.3f}: {c}; "
                            f"failed fits {failures or 'none'}; {elapsed / 60:.1f} min (1 worker)")
    assert ok


def test_criterion_5_unit_scenario7():
    t0 = time.perf_counter()
    cfg = ScenarioConfig("unit", 7, replicate_count=100, seed=2024)
    p = cfg.parameters()
    imprecise = int(np.argmax(p["omega"])) + 1
    res = run_simulation_study(cfg, UNIT_FAMILIES)
    ab = {f: res.metrics.get(f, imprecise, "abs_bias") for f in UNIT_FAMILIES}
    pairs = {"iid": ab["iid_shared"] < ab["iid_nonshared"], "bym": ab["bym_shared"] < ab["bym_nonshared"]}
    elapsed = time.perf_counter() - t0
    for f in UNIT_FAMILIES:
        print(f"  {f:14s} abs_bias outcome 1 {res.metrics.get(f, 1, 'abs_bias'):.5f} "
              f"outcome 2 {res.metrics.get(f, 2, 'abs_bias'):.5f}")
    ok = all(pairs.values())
    record_criterion(5, ok, f"imprecise outcome {imprecise}: abs bias iid shared {ab['iid_shared']:.4f} vs "
                            f"non-shared {ab['iid_nonshared']:.4f}; bym shared {ab['bym_shared']:.4f} vs non-shared "
                            f"{ab['bym_nonshared']:.4f}; {elapsed / 60:.1f} min (1 worker)")
    assert ok


def test_criterion_6_loo_ranking():
    t0 = time.perf_counter()
    cfg = ScenarioConfig("area", 6, replicate_count=50, seed=606)
    graph = cfg.graph
    wins = 0
    best_counts = {f: 0 for f in STAGE2}
    for k, (_, est) in enumerate(generate_area_scenario(cfg)):
        config = FitConfig.loo(seed=derived_seed(cfg.seed, k))
        scores = {f: loo_logscore_area(AreaModelSpec(f), est, graph, config).logscore_mean for f in STAGE2}
        best = min(scores, key=scores.get)
        best_counts[best] += 1
        wins += best == "biv_shared_bym"
        print(f"  replicate {k}: best {best} " + " ".join(f"{f}={v:.3f}" for f, v in scores.items()), flush=True)
    elapsed = time.perf_counter() - t0
    ok = wins >= 40
    record_criterion(6, ok, f"biv_shared_bym best in {wins}/50 replicates (need >= 40); best counts {best_counts}; "
                            f"{elapsed / 60:.1f} min (1 worker)")
    assert ok


def test_criterion_7_shared_direction():
    t0 = time.perf_counter()
    cfg = ScenarioConfig("area", 6, replicate_count=1, seed=7)
    (_, est), = generate_area_scenario(cfg)
    fits = {d: fit(AreaModelSpec("biv_shared_bym", shared_direction=d), est, cfg.graph, config=FitConfig(seed=7))
            for d in (2, 1)}
    med = {d: np.median(f.draws("mu"), axis=0) for d, f in fits.items()}
    sd = {d: f.draws("mu").std(axis=0) for d, f in fits.items()}
    pooled = np.sqrt((sd[1] ** 2 + sd[2] ** 2) / 2)
    ratio = float(np.max(np.abs(med[2] - med[1]) / pooled))
    elapsed = time.perf_counter() - t0
    ok = ratio <= 0.5 and elapsed < 600
    record_criterion(7, ok, f"max |median difference| / posterior sd = {ratio:.3f} (tol 0.5) over 47x2 cells, "
                            f"{elapsed:.0f}s")
    assert ok


def _tree(root: Path) -> dict[str, Path]:
    return {str(p.relative_to(root)): p for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    graph = str(DATA / "graph.json")
    q = str(DATA / "q.json")
    inputs = tmp_path / "inputs"
    assert cli_main(["direct", "--data", str(DATA / "survey.csv"), "--graph", graph, "--out-dir", str(inputs)]) == 0
    est = str(inputs / "direct_estimates.csv")
    assert cli_main(["fit", "--data", str(DATA / "survey.csv"), "--q", q, "--graph", graph, "--model",
                     "bym_shared", "--chains", "2", "--warmup", "100", "--draws", "100",
                     "--out-dir", str(inputs / "unit")]) == 0
    samples = str(inputs / "unit" / "samples.csv")
    commands = {
        "direct": ["direct", "--data", str(DATA / "survey.csv"), "--graph", graph],
        "fit_area": ["fit", "--estimates", est, "--graph", graph, "--model", "biv_shared_bym", "--chains", "2",
                     "--warmup", "200", "--draws", "200"],
        "fit_unit": ["fit", "--data", str(DATA / "survey.csv"), "--q", q, "--graph", graph, "--model",
                     "iid_shared", "--chains", "2", "--warmup", "100", "--draws", "100"],
        "loo": ["loo", "--estimates", est, "--graph", graph, "--models", "biv_shared_iid", "uni_bym",
                "--warmup", "100", "--draws", "100"],
        "simulate": ["simulate", "--scenario", "area:6", "--replicates", "3", "--models", "direct,biv_shared_bym",
                     "--graph", graph, "--chains", "1", "--warmup", "100", "--draws", "100"],
        "aggregate": ["aggregate", "--samples", samples, "--model", "bym_shared", "--q", q, "--graph", graph],
    }
    t0 = time.perf_counter()
    mismatched, counts = [], {}
    for name, argv in commands.items():
        runs = []
        for i in range(2):
            out = tmp_path / f"{name}_{i}"
            assert cli_main(argv + ["--out-dir", str(out)]) == 0, name
            runs.append(_tree(out))
        if name == "simulate":
            out = tmp_path / f"{name}_threads"
            assert cli_main(argv + ["--out-dir", str(out), "--threads", "2"]) == 0
            runs.append(_tree(out))
        counts[name] = len(runs[0])
        for other in runs[1:]:
            if set(other) != set(runs[0]):
                mismatched.append(f"{name}: file sets differ")
                continue
            mismatched += [f"{name}/{rel}" for rel in runs[0]
                           if not filecmp.cmp(runs[0][rel], other[rel], shallow=False)]
    elapsed = time.perf_counter() - t0
    ok = not mismatched
    record_criterion(8, ok, f"{sum(counts.values())} output files across {len(commands)} commands byte-identical on "
                            f"rerun (simulate also with --threads 2); mismatches {mismatched or 'none'}; "
                            f"{elapsed:.0f}s")
    assert ok


def test_criterion_9_single_fit_budget():
    area = generate_area_scenario(ScenarioConfig("area", 6, replicate_count=1, seed=9))[0][1]
    (unit_reps, q) = generate_unit_scenario(ScenarioConfig("unit", 7, replicate_count=1, seed=9))
    unit = unit_reps[0][1]
    graph = default_geography()
    times = {}
    for fam in STAGE2:
        t0 = time.perf_counter()
        fit(AreaModelSpec(fam), area, graph, config=FitConfig(seed=9))
        times[fam] = time.perf_counter() - t0
    for fam in UNIT_FAMILIES:
        t0 = time.perf_counter()
        fit(UnitModelSpec(fam), unit, graph, q, FitConfig(seed=9))
        times[fam] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fit(UnitModelSpec("bym_shared", per_region_likelihood_variance=True), unit, graph, q, FitConfig(seed=9))
    times["bym_shared+per_region_omega"] = time.perf_counter() - t0
    slowest = max(times, key=times.get)
    ok = times[slowest] < 600
    record_criterion(9, ok, f"{len(times)} fits at R=47 with 4x(2000+2000) iterations; slowest {slowest} "
                            f"{times[slowest]:.0f}s (budget 600s); total {sum(times.values()):.0f}s")
    assert ok
