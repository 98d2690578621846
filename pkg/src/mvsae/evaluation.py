"""Leave-one-out LogScore and simulation-study metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .direct import DirectEstimateSet, direct_estimates
from .mcmc import FitConfig, ModelFit, NumericalError, fit_many
from .models import ModelError
from .parallel import chunked, map_chunks
from .survey import AdjacencyGraph, RuralFractions, SurveyDataset

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
SUMMARY_PROBS = (0.025, 0.1, 0.5, 0.9, 0.975)


def derived_seed(seed: int, *keys: int) -> int:
    """Integer seed that depends only on ``seed`` and ``keys``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# robust batched fitting
# ---------------------------------------------------------------------------

def fit_batch(spec, datasets: Sequence, graph: AdjacencyGraph, q=None, config: FitConfig | None = None,
              seeds: Sequence[int] | None = None, holdout: Sequence[int | None] | None = None
              ) -> list[ModelFit | None]:
    """``fit_many`` that isolates failures: if the batch diverges, problems
    are refitted one at a time and failed ones come back as None."""
    try:
        return list(fit_many(spec, datasets, graph, q, config, seeds, holdout))
    except (NumericalError, np.linalg.LinAlgError) as exc:
        if len(datasets) == 1:
            log.warning("fit failed: %s", exc)
            return [None]
    holdout = list(holdout) if holdout is not None else [None] * len(datasets)
    seeds = list(seeds) if seeds is not None else [config.seed] * len(datasets)
    out = []
    for d, s, h in zip(datasets, seeds, holdout):
        out += fit_batch(spec, [d], graph, q, config, [s], [h])
    return out


# ---------------------------------------------------------------------------
# LogScore
# ---------------------------------------------------------------------------

@dataclass
class LogScoreReport:
    """Per-region ``log lhat_r`` (nan when not scored) and the LogScore.

    ``logscore_sum = -sum(log lhat_r)`` over scored regions and
    ``logscore_mean`` divides by the number of scored regions.
    """

    model_id: str
    per_region_loglik: np.ndarray
    region_labels: tuple[str, ...]
    flagged: list[int] = field(default_factory=list)  # underflowed (log lhat = -inf)
    excluded: list[int] = field(default_factory=list)  # refit failed or no target
    notes: list[str] = field(default_factory=list)

    @property
    def scored(self) -> np.ndarray:
        return ~np.isnan(self.per_region_loglik)

    @property
    def logscore_sum(self) -> float:
        return float(-np.sum(self.per_region_loglik[self.scored]))

    @property
    def logscore_mean(self) -> float:
        n = int(self.scored.sum())
        return self.logscore_sum / n if n else float("nan")

    @property
    def scored_fraction(self) -> float:
        return float(self.scored.mean()) if self.per_region_loglik.size else 0.0


def log_predictive_density(y: np.ndarray, V: np.ndarray, mu_draws: np.ndarray) -> float:
    """``log((1/S) sum_s N(y; mu_s, V))`` accumulated on the log scale.

    ``mu_draws`` is (S, k) for a k-vector ``y``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    mu = np.asarray(mu_draws, dtype=float).reshape(-1, y.size)
    L = np.linalg.cholesky(V)
    z = np.linalg.solve(L, (y[None, :] - mu).T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    ld = -0.5 * (y.size * LOG_2PI + logdet + np.sum(z**2, axis=0))
    return float(logsumexp(ld) - np.log(len(ld)))


def _score_targets(est: DirectEstimateSet):
    """Regions with an evaluation target, as (region, outcome index, y, V)."""
    out = []
    for r in range(est.n_regions):
        idx, y, V = est.region_block(r)
        if idx.size and np.all(np.isfinite(y)) and np.all(np.isfinite(V)):
            out.append((r, idx, y, V))
    return out


def _loo_chunk(regions, *, spec, data, graph, q, config):
    seeds = [derived_seed(config.seed, r) for r in regions]
    fits = fit_batch(spec, [data] * len(regions), graph, q, config, seeds, list(regions))
    return [None if f is None else f.draws("mu")[:, :, r] for f, r in zip(fits, regions)]


def _loo(spec, data, target: DirectEstimateSet, graph, q, config, workers, chunk_size) -> LogScoreReport:
    if getattr(spec, "is_direct", False):
        raise ModelError("the direct family has no predictive distribution for a held-out region")
    config = config or FitConfig.loo()
    if config.store is not None and "mu" not in config.store:
        config = replace(config, store=tuple(config.store) + ("mu",))
    elif config.store is None:
        config = replace(config, store=("mu",))
    R = graph.n_nodes
    ll = np.full(R, np.nan)
    report = LogScoreReport(getattr(spec, "name", spec.family), ll, graph.labels)
    targets = _score_targets(target)
    have = {t[0] for t in targets}
    for r in range(R):
        if r not in have:
            report.excluded.append(r)
            report.notes.append(f"region {graph.labels[r]}: no Stage-1 estimate to score against; skipped")
    regions = [t[0] for t in targets]
    work = partial(_loo_chunk, spec=spec, data=data, graph=graph, q=q, config=config)
    draws = [d for part in map_chunks(work, chunked(regions, chunk_size), workers) for d in part]
    for (r, idx, y, V), mu in zip(targets, draws):
        if mu is None:
            report.excluded.append(r)
            report.notes.append(f"region {graph.labels[r]}: held-out refit failed; excluded")
            continue
        val = log_predictive_density(y, V, mu[:, idx])
        ll[r] = val
        if val == -np.inf:
            report.flagged.append(r)
            report.notes.append(f"region {graph.labels[r]}: predictive density underflowed")
    report.excluded.sort()
    return report


def loo_logscore_area(spec, estimates: DirectEstimateSet, graph: AdjacencyGraph,
                      config: FitConfig | None = None, workers: int = 1, chunk_size: int = 64) -> LogScoreReport:
    """Refit with each region's direct estimate held out and score the held-out
    estimate under the refit's posterior predictive (design covariance of the
    held-out region, all available outcomes)."""
    return _loo(spec, estimates, estimates, graph, None, config, workers, chunk_size)


def loo_logscore_unit(spec, data: SurveyDataset, graph: AdjacencyGraph, q: RuralFractions,
                      config: FitConfig | None = None, lonely_psu: str = "error", workers: int = 1,
                      chunk_size: int = 64, targets: DirectEstimateSet | None = None) -> LogScoreReport:
    """Unit-level LOO: all clusters of a region are held out and the aggregated
    posterior mean is scored against that region's direct estimate."""
    if q is None:
        raise ModelError("unit-level LOO needs rural fractions q")
    target = targets if targets is not None else direct_estimates(data, lonely_psu)
    return _loo(spec, data, target, graph, q, config, workers, chunk_size)


def write_logscore_csv(reports: Sequence[LogScoreReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "region", "log_lhat"])
        for rep in reports:
            for r, lab in enumerate(rep.region_labels):
                v = rep.per_region_loglik[r]
                w.writerow([rep.model_id, lab, "" if np.isnan(v) else repr(float(v))])


def write_logscore_summary_csv(reports: Sequence[LogScoreReport], path) -> None:
    """One row per model, ranked by ``logscore_mean`` (ties keep input order)."""
    ranked = sorted(reports, key=lambda rep: (np.nan_to_num(rep.logscore_mean, nan=np.inf)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "logscore_sum", "logscore_mean"])
        for rep in ranked:
            w.writerow([rep.model_id, repr(rep.logscore_sum), repr(rep.logscore_mean)])


# ---------------------------------------------------------------------------
# posterior summaries and simulation metrics
# ---------------------------------------------------------------------------

def posterior_summary(fit: ModelFit, probs=SUMMARY_PROBS) -> dict[str, np.ndarray]:
    """Median and central intervals of ``mu``: arrays shaped (2, R)."""
    qs = fit.mu_quantiles(probs)
    out = {f"q{p * 100:g}": qs[i] for i, p in enumerate(probs)}
    out["median"] = np.quantile(fit.draws("mu"), 0.5, axis=0)
    out["lower"] = np.quantile(fit.draws("mu"), 0.025, axis=0)
    out["upper"] = np.quantile(fit.draws("mu"), 0.975, axis=0)
    return out


METRIC_NAMES = ("bias", "abs_bias", "variance", "mse", "coverage", "width")


@dataclass
class MetricsReport:
    """Rows keyed by (scenario, model, outcome, region); region ``"all"`` holds
    the average over regions."""

    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def table(self):
        import pandas as pd
        return pd.DataFrame(self.rows, columns=["scenario", "model", "outcome", "region", *METRIC_NAMES,
                                                "replicates"])

    def get(self, model: str, outcome: int, metric: str, scenario=None, region: str = "all") -> float:
        for row in self.rows:
            if (row["model"] == model and row["outcome"] == outcome and row["region"] == region
                    and (scenario is None or row["scenario"] == scenario)):
                return row[metric]
        raise KeyError((scenario, model, outcome, region))

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        self.rows += other.rows
        self.notes += other.notes
        return self

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "model", "outcome", "region", *METRIC_NAMES, "replicates"])
            for row in self.rows:
                w.writerow([row["scenario"], row["model"], row["outcome"], row["region"],
                            *[repr(float(row[m])) for m in METRIC_NAMES], row["replicates"]])


def region_metrics(truth, estimate, lower, upper) -> dict[str, np.ndarray]:
    """Per-region metrics from arrays shaped (K replicates, ...).

    Errors are ``estimate - truth``; variance is their population variance
    over replicates so ``mse = bias**2 + variance``. Intervals are closed.
    """
    truth, estimate = np.asarray(truth, float), np.asarray(estimate, float)
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    if not (truth.shape == estimate.shape == lower.shape == upper.shape):
        raise ValueError("truths and summaries must have matching shapes (replicates first)")
    err = estimate - truth
    bias = err.mean(axis=0)
    variance = ((err - bias) ** 2).mean(axis=0)
    return {
        "bias": bias,
        "abs_bias": np.abs(err).mean(axis=0),
        "variance": variance,
        "mse": (err**2).mean(axis=0),
        "coverage": ((lower <= truth) & (truth <= upper)).mean(axis=0),
        "width": (upper - lower).mean(axis=0),
    }


def simulation_metrics(truths, fits, scenario="", model: str = "",
                       region_labels: Sequence[str] | None = None) -> MetricsReport:
    """Metrics for one model over replicates.

    ``truths`` is (K, C, R); ``fits`` is a length-K sequence of posterior
    summaries (dicts with ``median``, ``lower``, ``upper`` arrays shaped
    (C, R)) or ModelFit objects.
    """
    truths = np.asarray(truths, dtype=float)
    if truths.ndim != 3:
        raise ValueError("truths must be shaped (replicates, outcomes, regions)")
    if len(fits) != truths.shape[0]:
        raise ValueError(f"replicate mismatch: {truths.shape[0]} truths, {len(fits)} fits")
    sums = [posterior_summary(f) if isinstance(f, ModelFit) else f for f in fits]
    est = np.stack([s["median"] for s in sums])
    lo = np.stack([s["lower"] for s in sums])
    hi = np.stack([s["upper"] for s in sums])
    m = region_metrics(truths, est, lo, hi)
    K, C, R = truths.shape
    labels = list(region_labels) if region_labels is not None else [str(r + 1) for r in range(R)]
    rep = MetricsReport()
    for c in range(C):
        row = {"scenario": scenario, "model": model, "outcome": c + 1, "region": "all", "replicates": K}
        row.update({k: float(v[c].mean()) for k, v in m.items()})
        rep.rows.append(row)
        for r in range(R):
            row = {"scenario": scenario, "model": model, "outcome": c + 1, "region": labels[r], "replicates": K}
            row.update({k: float(v[c, r]) for k, v in m.items()})
            rep.rows.append(row)
    return rep
