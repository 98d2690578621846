"""Synthetic scenarios for area- and unit-level simulation studies.

Area scenarios 1-9 simulate direct estimates around true means; unit
scenarios 1-7 simulate individual outcomes on a stratified cluster layout.
Each replicate redraws random effects and data from
``SeedSequence(seed, spawn_key=(k,))``; the Stage-1 design (variances,
correlations, rural fractions) is drawn once per study from its own stream
so it is shared by all replicates.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .direct import DirectEstimateSet, write_direct_estimates_csv
from .evaluation import SUMMARY_PROBS, MetricsReport, derived_seed, fit_batch, posterior_summary, simulation_metrics
from .mcmc import FitConfig
from .models import AREA_FAMILIES, UNIT_FAMILIES, aggregate_means, canonical_family, combine_shared, model_spec
from .parallel import chunked, map_chunks
from .spatial import sample_constrained_icar, scaled_icar
from .survey import AdjacencyGraph, RuralFractions, SurveyDataset, default_geography, write_survey_csv

log = logging.getLogger(__name__)

AREA_DEFAULTS = {
    "beta": (-0.98, -0.87),
    "sigma": (0.19, 0.25),
    "rho": (0.79, 0.92),
    "lambda": 0.75,
}
UNIT_DEFAULTS = {
    "beta": (-0.77, -0.66),
    "sigma": (0.13, 0.19),
    "rho": (0.71, 0.67),
    "lambda": 0.72,
    "gamma": (-0.29, -0.29),
    "omega": (1.31, 1.14),
    "sigma_eps": (0.36, 0.33),
}

# generating family per scenario
AREA_SCENARIOS = {
    1: "uni_iid", 2: "uni_bym", 3: "biv_nonshared_iid", 4: "biv_nonshared_bym",
    5: "biv_shared_iid", 6: "biv_shared_bym", 7: "biv_shared_bym", 8: "biv_shared_bym", 9: "biv_shared_bym",
}
UNIT_SCENARIOS = {
    1: "iid_nonshared", 2: "bym_nonshared", 3: "iid_shared", 4: "bym_shared",
    5: "bym_shared", 6: "bym_shared", 7: "bym_shared",
}

_DESIGN_KEY = 0x5EED


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """One scenario of a simulation study.

    ``variance_factor`` sets the large/small Stage-1 regimes of area scenarios
    7-9 (variances times the factor or its inverse) and ``unit_multiplier``
    the sd multipliers of unit scenarios 5-7.
    """

    level: str
    scenario_id: int
    graph: AdjacencyGraph | None = None
    replicate_count: int = 100
    seed: int = 0
    parameter_overrides: Mapping[str, object] = field(default_factory=dict)
    q: RuralFractions | None = None
    stage1_sd_range: tuple[float, float] = (0.05, 0.15)
    stage1_corr_range: tuple[float, float] = (0.34, 0.95)
    variance_factor: float = 10.0
    scenario9_corr: float = 0.5
    clusters_per_stratum: int = 4
    individuals_per_cluster: int = 15
    q_range: tuple[float, float] = (0.2, 0.9)
    unit_multiplier: float = 2.0
    shared_direction: int = 2

    def __post_init__(self):
        valid = AREA_SCENARIOS if self.level == "area" else UNIT_SCENARIOS if self.level == "unit" else None
        if valid is None:
            raise ScenarioError(f"level must be 'area' or 'unit', got {self.level!r}")
        if self.scenario_id not in valid:
            raise ScenarioError(f"{self.level} scenarios are {min(valid)}-{max(valid)}, got {self.scenario_id}")
        if self.replicate_count < 1:
            raise ScenarioError("replicate_count must be at least 1")
        known = set(UNIT_DEFAULTS if self.level == "unit" else AREA_DEFAULTS)
        unknown = set(self.parameter_overrides) - known
        if unknown:
            raise ScenarioError(f"unknown parameters for {self.level} level: {sorted(unknown)}")
        if self.graph is None:
            object.__setattr__(self, "graph", default_geography())

    @property
    def family(self) -> str:
        return (AREA_SCENARIOS if self.level == "area" else UNIT_SCENARIOS)[self.scenario_id]

    @property
    def label(self) -> str:
        return f"{self.level}:{self.scenario_id}"

    def parameters(self) -> dict[str, np.ndarray]:
        """Generating values after scenario multipliers and overrides."""
        base = dict(UNIT_DEFAULTS if self.level == "unit" else AREA_DEFAULTS)
        base.update(self.parameter_overrides)
        out = {k: np.asarray(v, dtype=float) for k, v in base.items()}
        for k, v in out.items():
            if k != "lambda" and v.ndim == 0:
                out[k] = np.full(2, float(v))
        if self.level == "unit" and self.scenario_id in (5, 6, 7):
            m = self.unit_multiplier
            mult = {5: (m, m), 6: (1 / m, 1 / m), 7: (m, 1 / m)}[self.scenario_id]
            for k in ("omega", "sigma_eps"):
                out[k] = out[k] * np.asarray(mult)
        return out

    def to_dict(self) -> dict:
        return {
            "level": self.level, "scenario_id": self.scenario_id, "replicate_count": self.replicate_count,
            "seed": self.seed, "parameter_overrides": {k: np.asarray(v).tolist() for k, v in
                                                       self.parameter_overrides.items()},
            "stage1_sd_range": list(self.stage1_sd_range), "stage1_corr_range": list(self.stage1_corr_range),
            "variance_factor": self.variance_factor, "scenario9_corr": self.scenario9_corr,
            "clusters_per_stratum": self.clusters_per_stratum,
            "individuals_per_cluster": self.individuals_per_cluster, "q_range": list(self.q_range),
            "unit_multiplier": self.unit_multiplier, "shared_direction": self.shared_direction,
        }

    @classmethod
    def from_dict(cls, d: Mapping, graph: AdjacencyGraph | None = None, q: RuralFractions | None = None):
        d = dict(d)
        for k in ("stage1_sd_range", "stage1_corr_range", "q_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(graph=graph, q=q, **d)


def load_scenario_config(path, graph=None, q=None) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), graph, q)


def _design_rng(config: ScenarioConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(config.seed), _DESIGN_KEY]))


def replicate_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(k),)))


def draw_effects(family: str, params: Mapping[str, np.ndarray], graph: AdjacencyGraph,
                 rng: np.random.Generator, shared_direction: int = 2, icar=None) -> np.ndarray:
    """Total random effects ``g`` (2, R) for a generating family."""
    R = graph.n_nodes
    sigma = params["sigma"]
    spatial = "bym" in family
    if spatial and icar is None:
        icar = scaled_icar(graph)
    s = np.zeros((2, R))
    for c in range(2):
        v = rng.standard_normal(R)
        if spatial and icar is not None:
            rho = float(params["rho"][c])
            u = sample_constrained_icar(icar, rng)
            island = icar.singleton
            s[c] = sigma[c] * np.where(island, v, np.sqrt(1.0 - rho) * v + np.sqrt(rho) * u)
        else:
            s[c] = sigma[c] * v
    if "nonshared" not in family and "shared" in family:
        return combine_shared(s, float(params["lambda"]), shared_direction - 1)
    return s


# ---------------------------------------------------------------------------
# area level
# ---------------------------------------------------------------------------

def area_design(config: ScenarioConfig) -> np.ndarray:
    """Stage-1 covariances (R, 2, 2), fixed across replicates."""
    rng = _design_rng(config)
    R = config.graph.n_nodes
    sd = rng.uniform(*config.stage1_sd_range, size=(R, 2))
    corr = rng.uniform(*config.stage1_corr_range, size=R)
    sid = config.scenario_id
    if sid in (1, 2):
        corr = np.zeros(R)
    f = config.variance_factor
    if sid == 7:
        sd = sd * np.sqrt(f)
    elif sid == 8:
        sd = sd / np.sqrt(f)
    elif sid == 9:
        sd = sd * np.sqrt([f, 1.0 / f])
        corr = np.full(R, config.scenario9_corr)
    V = np.empty((R, 2, 2))
    V[:, 0, 0] = sd[:, 0] ** 2
    V[:, 1, 1] = sd[:, 1] ** 2
    V[:, 0, 1] = V[:, 1, 0] = corr * sd[:, 0] * sd[:, 1]
    return V


def generate_area_scenario(config: ScenarioConfig, replicates: Sequence[int] | None = None):
    """List of ``(true mu (2, R), DirectEstimateSet)`` per replicate."""
    if config.level != "area":
        raise ScenarioError("not an area-level scenario")
    params = config.parameters()
    V = area_design(config)
    chol = np.linalg.cholesky(V)
    graph = config.graph
    icar = scaled_icar(graph) if "bym" in config.family else None
    out = []
    for k in (range(config.replicate_count) if replicates is None else replicates):
        rng = replicate_rng(config.seed, k)
        g = draw_effects(config.family, params, graph, rng, config.shared_direction, icar)
        mu = params["beta"][:, None] + g
        z = rng.standard_normal((graph.n_nodes, 2))
        y = mu.T + np.einsum("rij,rj->ri", chol, z)
        est = DirectEstimateSet(y, V.copy(), np.ones((graph.n_nodes, 2), dtype=bool), graph.labels)
        out.append((mu, est))
    return out


# ---------------------------------------------------------------------------
# unit level
# ---------------------------------------------------------------------------

def rural_fractions(config: ScenarioConfig) -> RuralFractions:
    if config.q is not None:
        return config.q
    rng = _design_rng(config)
    rng.uniform(size=3 * config.graph.n_nodes)  # keep q independent of the area design draws
    return RuralFractions(rng.uniform(*config.q_range, size=config.graph.n_nodes))


def _unit_layout(config: ScenarioConfig, q: np.ndarray):
    graph = config.graph
    K, n = config.clusters_per_stratum, config.individuals_per_cluster
    region, rural, cluster, stratum, weight = [], [], [], [], []
    cl_region, cl_rural = [], []
    for r, lab in enumerate(graph.labels):
        for is_rural in (False, True):
            tag = "rural" if is_rural else "urban"
            share = q[r] if is_rural else 1.0 - q[r]
            w = 1000.0 * max(share, 1e-12) / (K * n)
            for k in range(K):
                cid = f"{lab}-{tag}-{k + 1}"
                cl_region.append(r)
                cl_rural.append(is_rural)
                for _ in range(n):
                    region.append(r)
                    rural.append(is_rural)
                    cluster.append(cid)
                    stratum.append(f"{lab}-{tag}")
                    weight.append(w)
    return (np.array(region), np.array(rural), cluster, stratum, np.array(weight),
            np.array(cl_region), np.array(cl_rural))


def generate_unit_scenario(config: ScenarioConfig, replicates: Sequence[int] | None = None):
    """List of ``(true mu (2, R), SurveyDataset)`` per replicate, plus the rural fractions.

    Returns ``(replicates, q)``.
    """
    if config.level != "unit":
        raise ScenarioError("not a unit-level scenario")
    params = config.parameters()
    qf = rural_fractions(config)
    q = qf.q
    graph = config.graph
    region, rural, cluster, stratum, weight, cl_region, cl_rural = _unit_layout(config, q)
    n_cl = len(cl_region)
    per = config.individuals_per_cluster
    icar = scaled_icar(graph) if "bym" in config.family else None
    out = []
    for k in (range(config.replicate_count) if replicates is None else replicates):
        rng = replicate_rng(config.seed, k)
        g = draw_effects(config.family, params, graph, rng, config.shared_direction, icar)
        mu = aggregate_means(params["beta"], params["gamma"], g, q)
        eps = rng.standard_normal((n_cl, 2)) * params["sigma_eps"]
        cl_mean = params["beta"] + cl_rural[:, None] * params["gamma"] + g[:, cl_region].T + eps
        y = np.repeat(cl_mean, per, axis=0) + rng.standard_normal((n_cl * per, 2)) * params["omega"]
        data = SurveyDataset(region, stratum, cluster, weight, rural, y, graph.n_nodes, graph.labels)
        out.append((mu, data))
    return out, qf


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

@dataclass
class StudyResult:
    """Metrics plus per-replicate summaries; failed fits are None."""

    metrics: MetricsReport
    truths: np.ndarray
    summaries: dict[str, list]
    parameter_medians: dict[str, list]
    failures: dict[str, list[int]]
    unhealthy: dict[str, list[int]]


_PARAMS = ("beta", "gamma", "sigma", "rho", "lambda", "omega", "sigma_eps")


def direct_summary(est: DirectEstimateSet, probs=SUMMARY_PROBS) -> dict[str, np.ndarray]:
    """Exact normal quantiles of the direct estimates (no Monte Carlo error)."""
    sd = np.sqrt(np.diagonal(est.V_hat, axis1=1, axis2=2)).T
    y = est.y_hat.T
    out = {f"q{p * 100:g}": y + norm.ppf(p) * sd for p in probs}
    out["median"] = y.copy()
    out["lower"] = y + norm.ppf(0.025) * sd
    out["upper"] = y + norm.ppf(0.975) * sd
    return out


def _fit_chunk(items, *, spec, graph, q, fit_config):
    if spec.family == "direct":
        return [(direct_summary(d), {}, True) for _, d in items]
    data = [d for _, d in items]
    seeds = [s for s, _ in items]
    fits = fit_batch(spec, data, graph, q, fit_config, seeds)
    out = []
    for f in fits:
        if f is None:
            out.append(None)
            continue
        meds = {k: np.median(f.draws(k), axis=0) for k in _PARAMS if k in f.samples}
        healthy = True if spec.family == "direct" else f.healthy
        out.append((posterior_summary(f), meds, healthy))
    return out


def _write_truth_csv(mu: np.ndarray, labels, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "mu1", "mu2"])
        for r, lab in enumerate(labels):
            w.writerow([lab, repr(float(mu[0, r])), repr(float(mu[1, r]))])


def _write_summary_csv(summary: dict, labels, path) -> None:
    keys = ["median", "q2.5", "q10", "q90", "q97.5"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "outcome", *keys])
        for c in range(summary["median"].shape[0]):
            for r, lab in enumerate(labels):
                w.writerow([lab, c + 1, *[repr(float(summary[k][c, r])) for k in keys]])


def run_simulation_study(config: ScenarioConfig, models: Sequence[str] | None = None,
                         fit_config: FitConfig | None = None, archive_dir=None, workers: int = 1,
                         chunk_size: int = 25) -> StudyResult:
    """Generate every replicate, fit every model, accumulate metrics.

    Fits of replicate ``k`` with model ``m`` (position in ``models``) use
    seed ``derived_seed(config.seed, k, m)``. A failed fit is excluded from
    that model's metrics and reported in ``failures``.
    """
    families = AREA_FAMILIES if config.level == "area" else UNIT_FAMILIES
    models = [canonical_family(m) for m in (models or families)]
    bad = [m for m in models if m not in families]
    if bad:
        raise ScenarioError(f"models {bad} are not {config.level}-level families")
    fit_config = fit_config or FitConfig.simulation()
    store = tuple(dict.fromkeys(("mu",) + _PARAMS))
    fit_config = replace(fit_config, store=store)
    if config.level == "area":
        reps = generate_area_scenario(config)
        q = None
    else:
        reps, q = generate_unit_scenario(config)
    truths = np.stack([mu for mu, _ in reps])
    labels = config.graph.labels
    metrics = MetricsReport()
    result = StudyResult(metrics, truths, {}, {}, {}, {})
    for mi, fam in enumerate(models):
        spec = model_spec(fam, shared_direction=config.shared_direction) if "shared" in fam and "non" not in fam \
            else model_spec(fam)
        items = [(derived_seed(config.seed, k, mi), d) for k, (_, d) in enumerate(reps)]
        work = partial(_fit_chunk, spec=spec, graph=config.graph, q=q, fit_config=fit_config)
        res = [r for part in map_chunks(work, chunked(items, chunk_size), workers) for r in part]
        ok = [k for k, r in enumerate(res) if r is not None]
        result.failures[fam] = [k for k, r in enumerate(res) if r is None]
        result.unhealthy[fam] = [k for k in ok if not res[k][2]]
        result.summaries[fam] = [None if r is None else r[0] for r in res]
        result.parameter_medians[fam] = [None if r is None else r[1] for r in res]
        if result.failures[fam]:
            metrics.notes.append(f"{fam}: {len(result.failures[fam])} replicate fit(s) failed and were excluded")
        if ok:
            metrics.extend(simulation_metrics(truths[ok], [res[k][0] for k in ok], config.label, fam, labels))
    if archive_dir is not None:
        _write_archive(Path(archive_dir), config, reps, q, result)
    return result


def _write_archive(root: Path, config: ScenarioConfig, reps, q, result: StudyResult) -> None:
    base = root / f"scenario_{config.scenario_id}"
    labels = config.graph.labels
    for k, (mu, data) in enumerate(reps):
        d = base / f"replicate_{k}"
        d.mkdir(parents=True, exist_ok=True)
        if isinstance(data, DirectEstimateSet):
            write_direct_estimates_csv(data, d / "data.csv")
        else:
            write_survey_csv(data, d / "data.csv")
        _write_truth_csv(mu, labels, d / "truth.csv")
        for fam, sums in result.summaries.items():
            if sums[k] is not None:
                _write_summary_csv(sums[k], labels, d / f"fit_{fam}.csv")
    if q is not None:
        (base / "q.json").write_text(json.dumps({"q": [float(v) for v in q.q]}), encoding="utf-8")
    (base / "scenario.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
