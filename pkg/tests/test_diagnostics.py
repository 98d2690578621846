import numpy as np
import pytest

from mvsae.diagnostics import DiagnosticsTable, diagnose, ess, split_rhat
from mvsae.direct import DirectEstimateSet
from mvsae.mcmc import FitConfig, fit
from mvsae.models import AreaModelSpec
from mvsae.survey import lattice_graph


def test_iid_draws():
    x = np.random.default_rng(0).standard_normal((4, 5000))
    assert split_rhat(x) == pytest.approx(1.0, abs=0.02)
    assert ess(x) == pytest.approx(x.size, rel=0.1)


def test_ar1_ess_matches_theory():
    rng = np.random.default_rng(1)
    phi, n = 0.8, 50_000
    e = rng.standard_normal((2, n))
    x = np.zeros((2, n))
    for t in range(1, n):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    # integrated autocorrelation time (1 + phi) / (1 - phi) = 9
    assert ess(x) == pytest.approx(2 * n / 9, rel=0.15)


def test_constant_chains():
    assert ess(np.full((2, 100), 3.0)) == 1.0
    assert np.isnan(split_rhat(np.full((2, 100), 3.0)))
    two = np.vstack([np.full(100, 1.0), np.full(100, 2.0)])
    assert split_rhat(two) > 2


def test_separated_chains_flagged():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 1000)) + np.array([[0.0], [3.0]])
    assert split_rhat(x) > 1.5


def test_single_chain_rhat_is_nan():
    assert np.isnan(split_rhat(np.random.default_rng(0).standard_normal((1, 100))))


def test_table_health_and_json():
    t = DiagnosticsTable({"sigma.1": {"ess": 5.0, "rhat": 1.2}, "beta.1": {"ess": 900.0, "rhat": 1.001}}, 2)
    assert not t.healthy
    assert t.unhealthy_parameters() == ["sigma.1"]
    assert t.low_ess() == ["sigma.1"]
    assert '"healthy": false' in t.to_json()


def test_diagnose_skips_fixed_and_missing():
    g = lattice_graph(2, 2)
    y = np.array([[-0.9, -0.8], [-1.0, np.nan], [-0.7, -0.6], [-0.8, -0.9]])
    V = np.tile(np.eye(2) * 0.02, (4, 1, 1))
    V[1, :, 1] = V[1, 1, :] = np.nan
    avail = ~np.isnan(y)
    est = DirectEstimateSet(y, V, avail)
    f = fit(AreaModelSpec("biv_nonshared_iid"), est, g,
            config=FitConfig(chains=2, warmup=100, draws=200, seed=1, fixed={"sigma": 0.2}))
    table = diagnose(f)
    assert not any(k.startswith("sigma") for k in table.rows)
    assert "mu.2.2" in table.rows
    assert set(table.rows["beta.1"]) == {"ess", "rhat"}
