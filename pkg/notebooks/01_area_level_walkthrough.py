"""
Area-level walkthrough
======================

Simulate direct estimates on the 47-node lattice, fit the direct and the
shared BYM model, and compare them against the known truth. Runs in about a
minute.
"""

# %%
import numpy as np

from mvsae import AreaModelSpec, FitConfig, ScenarioConfig, fit, generate_area_scenario
from mvsae.evaluation import loo_logscore_area, posterior_summary

# one replicate of area scenario 6: shared BYM effects, full Stage-1 covariances
cfg = ScenarioConfig("area", 6, replicate_count=1, seed=42)
(mu_true, est), = generate_area_scenario(cfg)
graph = cfg.graph
print(graph.n_nodes, "regions; first direct estimate", est.y_hat[0], "with covariance\n", est.V_hat[0])

# %%
# the shared BYM fit; a shorter run than the default is enough for a look
res = fit(AreaModelSpec("biv_shared_bym"), est, graph, config=FitConfig(chains=2, warmup=1000, draws=1000, seed=1))
print("healthy:", res.healthy)
for name in ("beta", "sigma", "rho", "lambda"):
    d = res.draws(name)
    print(f"{name:7s} median {np.round(np.median(d, axis=0), 3)}")

# %%
# smoothing shrinks noisy direct estimates toward their neighbours
summ = posterior_summary(res)
direct_err = np.abs(est.y_hat.T - mu_true).mean(axis=1)
model_err = np.abs(summ["median"] - mu_true).mean(axis=1)
direct_width = 2 * 1.96 * np.sqrt(np.diagonal(est.V_hat, axis1=1, axis2=2)).T.mean(axis=1)
model_width = (summ["upper"] - summ["lower"]).mean(axis=1)
for c in range(2):
    print(f"outcome {c + 1}: mean |error| direct {direct_err[c]:.3f} vs model {model_err[c]:.3f}; "
          f"95% width {direct_width[c]:.3f} vs {model_width[c]:.3f}")

# %%
# leave-one-out LogScore for two candidates on a 3x3 corner of the map, to keep it quick
from mvsae import lattice_graph  # noqa: E402
from mvsae.direct import DirectEstimateSet  # noqa: E402

small = lattice_graph(3, 3)
idx = [r * 7 + c - 1 for r in range(1, 4) for c in range(1, 4)]  # interior 3x3 block of the 7x7 lattice
sub = DirectEstimateSet(est.y_hat[idx], est.V_hat[idx], est.availability[idx])
for fam in ("biv_nonshared_iid", "biv_shared_bym"):
    rep = loo_logscore_area(AreaModelSpec(fam), sub, small, FitConfig.loo(seed=3, warmup=300, draws=500))
    print(f"{fam:18s} LogScore mean {rep.logscore_mean:.3f}")
