"""Reference computations written independently of the package internals.

Each oracle takes plain arrays and recomputes a quantity from first
principles (explicit loops, dense linear algebra, quadrature) so tests can
compare it against the optimized code paths.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np
from scipy import stats


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def _hajek_complex(w, y):
    return np.sum(w * y) / np.sum(w)


def brute_force_linearization(weights, y, strata, clusters):
    """Hájek mean vector and its stratified ultimate-cluster covariance.

    The linearized variable of every record is obtained by complex-step
    differentiation of the Hájek ratio with respect to that record's weight
    (``z_i = w_i d yhat / d w_i``), so no closed-form residual is assumed.
    Records must be complete in every outcome.
    """
    w = np.asarray(weights, dtype=float)
    y = np.asarray(y, dtype=float)
    n, C = y.shape
    h = 1e-30
    z = np.zeros((n, C))
    for i in range(n):
        wc = w.astype(complex)
        wc[i] += 1j * h
        for c in range(C):
            z[i, c] = w[i] * _hajek_complex(wc, y[:, c]).imag / h
    means = np.array([np.sum(w * y[:, c]) / np.sum(w) for c in range(C)])

    totals: dict = defaultdict(lambda: np.zeros(C))
    stratum_of = {}
    for i in range(n):
        totals[clusters[i]] += z[i]
        stratum_of[clusters[i]] = strata[i]
    by_stratum: dict = defaultdict(list)
    for k, s in stratum_of.items():
        by_stratum[s].append(totals[k])
    V = np.zeros((C, C))
    for s, tl in by_stratum.items():
        nh = len(tl)
        if nh < 2:
            raise ValueError(f"stratum {s} has one cluster")
        tbar = sum(tl) / nh
        acc = np.zeros((C, C))
        for t in tl:
            acc += np.outer(t - tbar, t - tbar)
        V += nh / (nh - 1) * acc
    return means, V


def two_psu_variance(w, y, cluster):
    """Textbook with-replacement variance for one stratum with two PSUs:
    (t1 - t2)^2 on the linearized cluster totals."""
    w = np.asarray(w, float)
    y = np.asarray(y, float)
    m = np.sum(w * y) / np.sum(w)
    e = w * (y - m) / np.sum(w)
    ks = sorted(set(cluster))
    assert len(ks) == 2
    t = [sum(e[i] for i in range(len(e)) if cluster[i] == k) for k in ks]
    return (t[0] - t[1]) ** 2


# ---------------------------------------------------------------------------
# spatial
# ---------------------------------------------------------------------------

def laplacian(n, edges):
    Q = np.zeros((n, n))
    for i, j in edges:
        Q[i, j] -= 1
        Q[j, i] -= 1
        Q[i, i] += 1
        Q[j, j] += 1
    return Q


def components_bfs(n, edges):
    nb = [[] for _ in range(n)]
    for i, j in edges:
        nb[i].append(j)
        nb[j].append(i)
    seen = [False] * n
    out = []
    for s in range(n):
        if seen[s]:
            continue
        comp, stack = [], [s]
        seen[s] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for u in nb[v]:
                if not seen[u]:
                    seen[u] = True
                    stack.append(u)
        out.append(sorted(comp))
    return out


def constrained_variances(Q, tol=1e-9):
    """Diagonal of the pseudo-inverse of a (scaled) ICAR precision, per
    component, by dense eigendecomposition."""
    n = Q.shape[0]
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if Q[i, j] != 0]
    var = np.full(n, np.nan)
    for comp in components_bfs(n, edges):
        if len(comp) == 1:
            continue
        sub = Q[np.ix_(comp, comp)]
        vals, vecs = np.linalg.eigh(sub)
        keep = vals > tol * vals.max()
        ginv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
        var[comp] = np.diag(ginv)
    return var


def icar_generalized_inverse(Q, tol=1e-9):
    n = Q.shape[0]
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if Q[i, j] != 0]
    G = np.zeros((n, n))
    for comp in components_bfs(n, edges):
        if len(comp) == 1:
            continue
        sub = Q[np.ix_(comp, comp)]
        vals, vecs = np.linalg.eigh(sub)
        keep = vals > tol * vals.max()
        G[np.ix_(comp, comp)] = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return G


def scaled_laplacian(n, edges):
    """Laplacian scaled so each component's constrained variances have
    geometric mean one."""
    Q = laplacian(n, edges)
    var = constrained_variances(Q)
    S = Q.copy()
    for comp in components_bfs(n, edges):
        if len(comp) > 1:
            f = math.exp(np.mean(np.log(var[comp])))
            S[np.ix_(comp, comp)] *= f
    return S


# ---------------------------------------------------------------------------
# Gaussian posteriors with fixed hyperparameters
# ---------------------------------------------------------------------------

def gaussian_posterior(X, y, noise_cov, prior_cov, prior_mean=None):
    """Posterior of ``theta`` for ``y = X theta + e``, ``e ~ N(0, noise_cov)``.

    ``prior_cov`` may contain ``inf`` on the diagonal for flat coordinates
    (they must be uncorrelated with the rest a priori).
    """
    k = X.shape[1]
    m0 = np.zeros(k) if prior_mean is None else prior_mean
    flat = ~np.isfinite(np.diag(prior_cov))
    P0 = np.zeros((k, k))
    idx = np.flatnonzero(~flat)
    if idx.size:
        P0[np.ix_(idx, idx)] = np.linalg.inv(prior_cov[np.ix_(idx, idx)])
    Ni = np.linalg.inv(noise_cov)
    P = P0 + X.T @ Ni @ X
    S = np.linalg.inv(P)
    m = S @ (P0 @ m0 + X.T @ Ni @ y)
    return m, S


def area_design(R, shared=False, lam=0.0, source=1):
    """Map theta = (beta_1, beta_2, s_1 (R), s_2 (R)) to the stacked means
    mu = (mu_1 (R), mu_2 (R)); outcome ``1 - source`` receives ``lam * s_source``."""
    X = np.zeros((2 * R, 2 + 2 * R))
    for c in range(2):
        X[c * R:(c + 1) * R, c] = 1.0
        X[c * R:(c + 1) * R, 2 + c * R:2 + (c + 1) * R] = np.eye(R)
    if shared:
        tgt = 1 - source
        X[tgt * R:(tgt + 1) * R, 2 + source * R:2 + (source + 1) * R] += lam * np.eye(R)
    return X


def stacked_noise(V):
    """Block covariance over (outcome 1 regions, outcome 2 regions)."""
    R = V.shape[0]
    N = np.zeros((2 * R, 2 * R))
    for r in range(R):
        for a in range(2):
            for b in range(2):
                N[a * R + r, b * R + r] = V[r, a, b]
    return N


def bym2_cov(sigma, rho, Ginv):
    R = Ginv.shape[0]
    return sigma**2 * ((1 - rho) * np.eye(R) + rho * Ginv)


def area_mu_posterior(y, V, effect_covs, shared=False, lam=0.0, source=1):
    """Exact posterior mean and covariance of stacked mu for an area model
    with flat beta and effect covariances ``effect_covs[c]`` (R x R)."""
    R = y.shape[0]
    X = area_design(R, shared, lam, source)
    prior = np.zeros((2 + 2 * R, 2 + 2 * R))
    prior[0, 0] = prior[1, 1] = np.inf
    for c in range(2):
        sl = slice(2 + c * R, 2 + (c + 1) * R)
        prior[sl, sl] = effect_covs[c]
    m, S = gaussian_posterior(X, y.T.reshape(-1), stacked_noise(V), prior)
    return X @ m, X @ S @ X.T


def augmented_formulation_posterior(y, V, effect_covs, delta=1e-9):
    """Same model written as a univariate Gaussian likelihood with tiny noise
    and an explicit bivariate iid 'measurement' random effect per region of
    covariance ``V_r``; returns the posterior of stacked mu."""
    R = y.shape[0]
    k = 2 + 2 * R
    X0 = area_design(R)
    X = np.hstack([X0, np.eye(2 * R)])
    prior = np.zeros((k + 2 * R, k + 2 * R))
    prior[0, 0] = prior[1, 1] = np.inf
    for c in range(2):
        sl = slice(2 + c * R, 2 + (c + 1) * R)
        prior[sl, sl] = effect_covs[c]
    prior[k:, k:] = stacked_noise(V)
    m, S = gaussian_posterior(X, y.T.reshape(-1), delta * np.eye(2 * R), prior)
    return X0 @ m[:k], X0 @ S[:k, :k] @ X0.T


# ---------------------------------------------------------------------------
# criterion 3: grid quadrature for a 3-region bivariate non-shared iid model
# ---------------------------------------------------------------------------

def pc_log_density(sd, U=1.0, alpha=0.01):
    th = -math.log(alpha) / U
    return math.log(th) - th * sd


def grid_posterior_iid(y, V, log_sigma_grid, U=1.0, alpha=0.01):
    """Posterior moments of mu, sigma for ``biv_nonshared_iid`` with flat beta
    and PC priors, integrating beta and the effects analytically and the two
    sds on a tensor grid in log scale.

    Returns dict with mean/sd of mu (2, R) and of sigma (2,).
    """
    R = y.shape[0]
    ystack = y.T.reshape(-1)
    N = stacked_noise(V)
    Xb = np.zeros((2 * R, 2))
    Xb[:R, 0] = 1
    Xb[R:, 1] = 1
    sig = np.exp(log_sigma_grid)
    n = len(sig)
    logw = np.full((n, n), -np.inf)
    M = np.zeros((n, n, 2 * R))
    E2 = np.zeros((n, n, 2 * R))
    for i, s1 in enumerate(sig):
        for j, s2 in enumerate(sig):
            D = np.diag(np.r_[np.full(R, s1**2), np.full(R, s2**2)])
            Sig = N + D
            Si = np.linalg.inv(Sig)
            A = Xb.T @ Si @ Xb
            Ai = np.linalg.inv(A)
            bhat = Ai @ Xb.T @ Si @ ystack
            r = ystack - Xb @ bhat
            _, ld = np.linalg.slogdet(Sig)
            _, lda = np.linalg.slogdet(A)
            ll = -0.5 * ld - 0.5 * lda - 0.5 * r @ Si @ r
            # prior on sigma with Jacobian for the log grid
            lp = pc_log_density(s1, U, alpha) + pc_log_density(s2, U, alpha) + math.log(s1) + math.log(s2)
            logw[i, j] = ll + lp
            # conditional posterior of mu = Xb beta + s
            prior = np.zeros((2 + 2 * R, 2 + 2 * R))
            prior[0, 0] = prior[1, 1] = np.inf
            prior[2:, 2:] = D
            X = area_design(R)
            m, S = gaussian_posterior(X, ystack, N, prior)
            mu_m = X @ m
            mu_v = np.einsum("ij,jk,ik->i", X, S, X)
            M[i, j] = mu_m
            E2[i, j] = mu_v + mu_m**2
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = np.einsum("ij,ijk->k", w, M)
    var = np.einsum("ij,ijk->k", w, E2) - mean**2
    s1g, s2g = np.meshgrid(sig, sig, indexing="ij")
    sm = np.array([(w * s1g).sum(), (w * s2g).sum()])
    sv = np.array([(w * s1g**2).sum(), (w * s2g**2).sum()]) - sm**2
    return {
        "mu_mean": mean.reshape(2, R),
        "mu_sd": np.sqrt(var).reshape(2, R),
        "sigma_mean": sm,
        "sigma_sd": np.sqrt(sv),
        "edge_mass": float(w[0].sum() + w[-1].sum() + w[:, 0].sum() + w[:, -1].sum()),
    }


# ---------------------------------------------------------------------------
# Monte Carlo error
# ---------------------------------------------------------------------------

def batch_means_se(x, n_batches=40):
    """Standard error of the mean of a (chains, draws) array by batch means,
    an estimator independent of the package's ESS code."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        x = x[None]
    m, n = x.shape
    b = n // n_batches
    means = x[:, : b * n_batches].reshape(m, n_batches, b).mean(axis=2).ravel()
    return float(means.std(ddof=1) / math.sqrt(len(means)))


def mcse_mean_sd(x, n_batches=40):
    """(mean, sd, se of mean, se of sd) of pooled draws with batch-means SEs."""
    x = np.asarray(x, float)
    mean = float(x.mean())
    sd = float(x.std())
    se_m = batch_means_se(x, n_batches)
    se_v = batch_means_se((x - mean) ** 2, n_batches)
    return mean, sd, se_m, se_v / (2 * sd)


def binomial_interval(p, n, z=3.0):
    se = math.sqrt(p * (1 - p) / n)
    return p - z * se, p + z * se


def ks_uniform_pvalue(u):
    return float(stats.kstest(np.asarray(u, float), "uniform").pvalue)


# ---------------------------------------------------------------------------
# collapsed likelihoods and unit-level designs
# ---------------------------------------------------------------------------

def collapsed_loglik(y, noise_cov, Xb, Z, G):
    """log p(y | hyper) with effects ``Z s``, ``s ~ N(0, G)`` and flat fixed
    effects ``Xb beta`` integrated out, up to a constant that depends only on
    the dimensions of ``y`` and ``Xb``."""
    Sig = noise_cov + Z @ G @ Z.T
    Si = np.linalg.inv(Sig)
    A = Xb.T @ Si @ Xb
    bhat = np.linalg.solve(A, Xb.T @ Si @ y)
    r = y - Xb @ bhat
    return float(-0.5 * np.linalg.slogdet(Sig)[1] - 0.5 * np.linalg.slogdet(A)[1] - 0.5 * r @ Si @ r)


def effect_map(R, shared=False, lam=0.0, source=1):
    """Z with mu (stacked by outcome) = fixed part + Z (s_1, s_2)."""
    return area_design(R, shared, lam, source)[:, 2:]


def unit_design(region, rural, cluster, R, shared=False, lam=0.0, source=1):
    """Individual-level design for complete records stacked by outcome.

    Returns (Xb, Z, cluster incidence) with Xb over (beta_1, beta_2, gamma_1,
    gamma_2) and Z over (s_1, s_2).
    """
    n = len(region)
    Xb = np.zeros((2 * n, 4))
    Z = np.zeros((2 * n, 2 * R))
    for c in range(2):
        rows = slice(c * n, (c + 1) * n)
        Xb[rows, c] = 1.0
        Xb[rows, 2 + c] = rural
        Z[np.arange(c * n, (c + 1) * n), c * R + np.asarray(region)] = 1.0
    if shared:
        tgt = 1 - source
        Z[np.arange(tgt * n, (tgt + 1) * n), source * R + np.asarray(region)] += lam
    ids = {k: i for i, k in enumerate(dict.fromkeys(cluster))}
    inc = np.zeros((n, len(ids)))
    inc[np.arange(n), [ids[k] for k in cluster]] = 1.0
    return Xb, Z, inc


def unit_noise(inc, omega, sigma_eps):
    n = inc.shape[0]
    N = np.zeros((2 * n, 2 * n))
    for c in range(2):
        sl = slice(c * n, (c + 1) * n)
        N[sl, sl] = omega[c] ** 2 * np.eye(n) + sigma_eps[c] ** 2 * inc @ inc.T
    return N
