"""MCMC fitting for area- and unit-level models.

All models share one structure: given hyperparameters, the fixed effects and
the random effects are jointly Gaussian, so they can be integrated out
exactly. The sampler exploits this:

* hyperparameters (sds, mixing proportions, likelihood sds) are updated by
  componentwise adaptive random-walk Metropolis against the likelihood with
  the latent field integrated out;
* the latent field is then drawn in one block from its Gaussian full
  conditional;
* for shared families ``lambda`` is drawn from its Gaussian conditional given
  the shared effect, with fixed effects and the other outcome's effect
  integrated out.

Random effects live in the eigenbasis of the scaled ICAR precision, where the
BYM2 prior covariance is diagonal for every ``rho``; the sum-to-zero
constraint is exact because the constant modes carry no ICAR variance.
Unit-level data are collapsed to cluster means with the cluster errors
integrated out.

Several independent problems (chains, replicates, held-out refits) advance in
lockstep so the linear algebra is batched. Each problem owns its random
generator, so a problem's draws do not depend on what it is batched with.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln

from .direct import DirectEstimateSet
from .models import AreaModelSpec, ModelError, aggregate_means, combine_shared
from .spatial import SpectralBasis, scaled_icar
from .survey import AdjacencyGraph, RuralFractions, SurveyDataset

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    pass


class SamplerDivergence(NumericalError):
    """Non-finite log density at the current state; ``state`` holds a dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class FitConfig:
    chains: int = 4
    warmup: int = 2000
    draws: int = 2000
    thin: int = 1
    seed: int = 0
    proposal_sd: float = 0.5
    target_accept: float = 0.44
    fixed: Mapping[str, Any] = field(default_factory=dict)
    likelihood: bool = True
    store: tuple[str, ...] | None = None
    store_cluster_effects: bool = False
    variance_floor: float = 1e-10

    def __post_init__(self):
        if self.chains < 1 or self.warmup < 0 or self.draws < 1 or self.thin < 1:
            raise ValueError("need chains >= 1, warmup >= 0, draws >= 1, thin >= 1")
        if self.proposal_sd < 0:
            raise ValueError("proposal_sd must be non-negative")
        unknown = set(self.fixed) - {"sigma", "rho", "lambda", "omega", "sigma_eps"}
        if unknown:
            raise ValueError(f"cannot fix {sorted(unknown)}")

    @classmethod
    def simulation(cls, **kw) -> "FitConfig":
        return cls(**{"chains": 2, "warmup": 1000, "draws": 1000, **kw})

    @classmethod
    def loo(cls, **kw) -> "FitConfig":
        return cls(**{"chains": 1, "warmup": 500, "draws": 1000, **kw})

    @property
    def kept(self) -> int:
        return self.draws // self.thin


# ---------------------------------------------------------------------------
# fit results
# ---------------------------------------------------------------------------

@dataclass
class ModelFit:
    """Posterior draws shaped ``(chains, draws, ...)`` keyed by symbol."""

    spec: Any
    samples: dict[str, np.ndarray]
    seed: int
    chain_count: int
    config: FitConfig
    region_labels: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)
    acceptance: dict[str, float] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return next(iter(self.samples.values())).shape[1]

    def draws(self, name: str) -> np.ndarray:
        a = self.samples[name]
        return a.reshape((-1,) + a.shape[2:])

    @cached_property
    def diagnostics(self):
        from .diagnostics import diagnose
        return diagnose(self)

    @property
    def healthy(self) -> bool:
        return self.diagnostics.healthy

    def mu_quantiles(self, probs=(0.025, 0.1, 0.5, 0.9, 0.975)) -> np.ndarray:
        """Quantiles of ``mu`` shaped (len(probs), 2, R)."""
        return np.quantile(self.draws("mu"), probs, axis=0)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class _Stats:
    """Region-level sufficient statistics for a batch of problems."""

    Omega: np.ndarray  # (B, R, 2, 2)
    Xi: np.ndarray     # (B, R, p, 2)
    Phi: np.ndarray    # (B, p, p)
    eta: np.ndarray    # (B, R, 2)
    zeta: np.ndarray   # (B, p)
    yWy: np.ndarray    # (B,)
    const: np.ndarray  # (B,) log-likelihood terms free of the latent field


def _area_arrays(spec: AreaModelSpec, estimates: Sequence[DirectEstimateSet], R: int, floor: float,
                 likelihood: bool, notes: list[str]):
    B = len(estimates)
    y = np.zeros((B, R, 2))
    W = np.zeros((B, R, 2, 2))
    logdet = np.zeros(B)
    nobs = np.zeros(B)
    for i, est in enumerate(estimates):
        if est.n_regions != R or est.n_outcomes != 2:
            raise ModelError(f"direct estimates must be {R} regions x 2 outcomes, got {est.y_hat.shape}")
        if not likelihood:
            continue
        for r in range(R):
            idx, yr, V = est.region_block(r)
            if idx.size == 0:
                continue
            V = V.copy()
            if spec.stage1_covariance_mode == "diagonal":
                V = np.diag(np.diag(V))
            if not np.all(np.isfinite(V)) or not np.all(np.isfinite(yr)):
                raise ModelError(f"region {est.region_labels[r]}: non-finite direct estimate or covariance")
            scale = max(1e-300, float(np.max(np.abs(np.diag(V)))))
            if np.linalg.eigvalsh(V).min() < -1e-10 * max(1.0, scale):
                raise NumericalError(f"region {est.region_labels[r]}: stage-1 covariance is not PSD; "
                                     "apply the PSD projection in direct estimation first")
            dg = np.diag(V).copy()
            if np.any(dg < floor):
                V[np.diag_indices_from(V)] = np.maximum(dg, floor)
                notes.append(f"region {est.region_labels[r]}: stage-1 variance floored at {floor:g}")
                log.info("stage-1 variance floored for region %s", est.region_labels[r])
            try:
                Wb = np.linalg.inv(V)
                sign, ld = np.linalg.slogdet(V)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"region {est.region_labels[r]}: singular stage-1 covariance") from exc
            if sign <= 0:
                raise NumericalError(f"region {est.region_labels[r]}: singular stage-1 covariance")
            Wb = 0.5 * (Wb + Wb.T)
            W[i, r][np.ix_(idx, idx)] = Wb
            y[i, r, idx] = yr
            logdet[i] -= ld
            nobs[i] += idx.size
    return y, W, logdet, nobs


def _area_stats(y, W, logdet, nobs) -> _Stats:
    eta = np.einsum("brcd,brd->brc", W, y)
    return _Stats(
        Omega=W,
        Xi=W,
        Phi=W.sum(axis=1),
        eta=eta,
        zeta=eta.sum(axis=1),
        yWy=np.einsum("brc,brc->b", y, eta),
        const=0.5 * logdet - 0.5 * nobs * LOG_2PI,
    )


@dataclass
class _UnitArrays:
    region: np.ndarray   # (B, K) 0-based region per cluster
    z: np.ndarray        # (B, K) rural indicator
    n: np.ndarray        # (B, K, 2) observed individuals per outcome
    ybar: np.ndarray     # (B, K, 2)
    ss: np.ndarray       # (B, K, 2) within-cluster sum of squares
    active: np.ndarray   # (B, K, 2)
    onehot: np.ndarray   # (B, K, R)
    cluster_ids: list[np.ndarray]


def _cluster_summary(data: SurveyDataset):
    codes = data.cluster_codes
    K = int(codes.max()) + 1 if len(codes) else 0
    _, first = np.unique(codes, return_index=True)
    region = data.region[first]
    z = data.rural[first].astype(float)
    n = np.zeros((K, 2))
    ybar = np.zeros((K, 2))
    ss = np.zeros((K, 2))
    for c in range(2):
        obs = ~np.isnan(data.outcomes[:, c])
        yc = np.where(obs, data.outcomes[:, c], 0.0)
        n[:, c] = np.bincount(codes, weights=obs.astype(float), minlength=K)
        tot = np.bincount(codes, weights=yc, minlength=K)
        m = np.divide(tot, n[:, c], out=np.zeros(K), where=n[:, c] > 0)
        ybar[:, c] = m
        ss[:, c] = np.bincount(codes, weights=np.where(obs, (yc - m[codes]) ** 2, 0.0), minlength=K)
    ids = np.array([data.cluster[i] for i in first], dtype=object)
    return region, z, n, ybar, ss, ids


def _unit_arrays(datasets: Sequence[SurveyDataset], holdout: Sequence[int | None], R: int,
                 likelihood: bool) -> _UnitArrays:
    summaries = []
    for data in datasets:
        if data.n_outcomes != 2:
            raise ModelError("unit-level models need exactly 2 outcomes")
        if data.region_count != R:
            raise ModelError(f"dataset has {data.region_count} regions, graph has {R}")
        summaries.append(_cluster_summary(data))
    B = len(datasets)
    K = max(len(s[0]) for s in summaries) if summaries else 0
    region = np.zeros((B, K), dtype=np.int64)
    z = np.zeros((B, K))
    n = np.zeros((B, K, 2))
    ybar = np.zeros((B, K, 2))
    ss = np.zeros((B, K, 2))
    active = np.zeros((B, K, 2), dtype=bool)
    ids = []
    for i, (reg, zz, nn, yb, s2, cid) in enumerate(summaries):
        k = len(reg)
        region[i, :k] = reg
        z[i, :k] = zz
        n[i, :k] = nn
        ybar[i, :k] = yb
        ss[i, :k] = s2
        act = nn > 0
        if holdout[i] is not None:
            act &= (reg != holdout[i])[:, None]
        active[i, :k] = act if likelihood else False
        ids.append(cid)
    onehot = np.zeros((B, K, R))
    bi, ki = np.meshgrid(np.arange(B), np.arange(K), indexing="ij")
    onehot[bi, ki, region] = 1.0
    onehot *= active.any(axis=2)[:, :, None]
    return _UnitArrays(region, z, n, ybar, ss, active, onehot, ids)


def _unit_stats(ua: _UnitArrays, omega_cell: np.ndarray, sig_eps: np.ndarray) -> _Stats:
    act = ua.active
    n = np.where(act, ua.n, 1.0)
    om2 = omega_cell**2
    d = sig_eps[:, None, :] ** 2 + om2 / n
    inv = np.where(act, 1.0 / d, 0.0)
    iy = inv * ua.ybar
    z = ua.z[:, :, None]
    OT = np.swapaxes(ua.onehot, 1, 2)  # (B, R, K)
    O = OT @ inv            # (B, R, 2)
    Oz = OT @ (inv * z)
    eta = OT @ iy
    B, R = O.shape[:2]
    Omega = np.zeros((B, R, 2, 2))
    Xi = np.zeros((B, R, 4, 2))
    Phi = np.zeros((B, 4, 4))
    zeta = np.zeros((B, 4))
    for c in range(2):
        Omega[:, :, c, c] = O[:, :, c]
        Xi[:, :, c, c] = O[:, :, c]
        Xi[:, :, 2 + c, c] = Oz[:, :, c]
        so, soz = O[:, :, c].sum(axis=1), Oz[:, :, c].sum(axis=1)
        Phi[:, c, c] = so
        Phi[:, c, 2 + c] = Phi[:, 2 + c, c] = Phi[:, 2 + c, 2 + c] = soz
        zeta[:, c] = eta[:, :, c].sum(axis=1)
        zeta[:, 2 + c] = (iy[:, :, c] * ua.z).sum(axis=1)
    safe_om2 = np.where(act, om2, 1.0)
    within = np.where(act, -0.5 * (ua.n - 1.0) * (LOG_2PI + np.log(safe_om2))
                      - ua.ss / (2.0 * safe_om2) - 0.5 * np.log(n), 0.0)
    logdetW = -np.where(act, np.log(d), 0.0).sum(axis=(1, 2))
    nobs = act.sum(axis=(1, 2))
    const = 0.5 * logdetW - 0.5 * nobs * LOG_2PI + within.sum(axis=(1, 2))
    return _Stats(Omega, Xi, Phi, eta, zeta, (iy * ua.ybar).sum(axis=(1, 2)), const)


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

_LOG_PARAMS = ("sigma", "omega", "sigma_eps")


def _where(mask: np.ndarray, new, old):
    """Select per problem between two batched values (arrays, dicts or _Stats)."""
    if isinstance(new, dict):
        return {k: _where(mask, new[k], old[k]) for k in new}
    if isinstance(new, _Stats):
        return _Stats(*(_where(mask, getattr(new, f), getattr(old, f)) for f in _Stats.__dataclass_fields__))
    m = mask.reshape((-1,) + (1,) * (np.ndim(new) - 1))
    return np.where(m, new, old)


class DenseSolver:
    """Dense Cholesky of the augmented system ``[[Q, b], [b', yWy + 1]]``.

    The last row of the factor holds ``z = L^{-1} b`` and its last diagonal
    entry gives the quadratic form ``yWy - b'Q^{-1}b`` without extra solves.

    Hyperparameters of one outcome only touch the prior diagonal of that
    outcome's block. With the block ordered last, the leading part of the
    factor is unaffected, so a proposal costs one Cholesky of size R + 1
    (see :meth:`block_parts`).
    """

    def __init__(self, engine: "Engine"):
        self.e = engine

    def prepare(self, stats: _Stats, lam) -> dict:
        e = self.e
        H, b = e.gspace(stats)
        M, bm = e.shared_transform(H, b, lam)
        n = e.n
        A0 = np.empty((e.B, n + 1, n + 1))
        A0[:, :n, :n] = M
        A0[:, :n, n] = bm
        A0[:, n, :n] = bm
        A0[:, n, n] = stats.yWy + 1.0
        return {"A0": A0, "diag0": np.diagonal(M, axis1=1, axis2=2).copy()}

    def _order(self, last: int) -> np.ndarray:
        e = self.e
        other = e.tslice(1 - last)
        cur = e.tslice(last)
        return np.r_[np.arange(e.p), np.arange(other.start, other.stop), np.arange(cur.start, cur.stop), e.n]

    def factor(self, prep: dict, pd: np.ndarray, last: int = 1):
        """Full factor with outcome block ``last`` ordered last (1 = natural order)."""
        n = self.e.n
        A = prep["A0"]
        if last != 1:
            order = self._order(last)
            key = f"A0_last{last}"
            if key not in prep:
                # prep is rebuilt whenever lambda changes, so this stays in sync
                prep[key] = A[:, order[:, None], order[None, :]]
            A = prep[key].copy()
            diag = (prep["diag0"] + pd)[:, order[:-1]]
        else:
            A = A.copy()
            diag = prep["diag0"] + pd
        A[:, np.arange(n), np.arange(n)] = diag
        L, ok = cholesky_batch(A)
        return L, ok

    def summarize(self, L):
        n = self.e.n
        diag = np.diagonal(L, axis1=1, axis2=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            logdet = 2.0 * np.log(diag[:, :n]).sum(axis=1)
        return logdet, diag[:, n] ** 2 - 1.0

    def evaluate(self, prep: dict, pd: np.ndarray):
        L, ok = self.factor(prep, pd)
        logdet, quad = self.summarize(L)
        return logdet, quad, {"L": L}, ok

    def block_parts(self, L, pd_block):
        """Pieces of a factor (block last) that stay fixed while the block's prior changes."""
        e = self.e
        n, R = e.n, e.R
        s = n - R
        Lcc = L[:, s:n, s:n]
        zc = L[:, n, s:n]
        S0 = Lcc @ np.swapaxes(Lcc, 1, 2)
        S0[:, np.arange(R), np.arange(R)] -= pd_block
        with np.errstate(divide="ignore"):
            logdet_o = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)[:, :s]).sum(axis=1)
        return {
            "S0": S0,
            "bc": np.einsum("bij,bj->bi", Lcc, zc),
            "corner": L[:, n, n] ** 2 + np.einsum("bi,bi->b", zc, zc),
            "logdet_o": logdet_o,
        }

    def block_evaluate(self, parts: dict, pd_block):
        R = self.e.R
        A = np.empty((self.e.B, R + 1, R + 1))
        A[:, :R, :R] = parts["S0"]
        A[:, np.arange(R), np.arange(R)] += pd_block
        A[:, :R, R] = A[:, R, :R] = parts["bc"]
        A[:, R, R] = parts["corner"]
        Lc, ok = cholesky_batch(A)
        d = np.diagonal(Lc, axis1=1, axis2=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            logdet = parts["logdet_o"] + 2.0 * np.log(d[:, :R]).sum(axis=1)
        return logdet, d[:, R] ** 2 - 1.0, Lc, ok

    def splice(self, L, Lc):
        """Natural-order factor from one with the second block last and a new block factor."""
        n, R = self.e.n, self.e.R
        s = n - R
        L = L.copy()
        L[:, s:, s:] = Lc
        return L

    def draw(self, prep: dict, fac: dict, noise: np.ndarray) -> np.ndarray:
        L = fac["L"]
        n = self.e.n
        z = L[:, n, :n]
        x = np.empty((self.e.B, n))
        for i in range(self.e.B):
            x[i] = solve_triangular(L[i, :n, :n], z[i] + noise[i], lower=True, trans="T", check_finite=False)
        return x


class BlockSolver:
    """Exact solver for iid effects: the precision is 2x2 block diagonal over
    regions plus a dense border for the fixed effects, so a Schur complement
    reduces every factorization to 2x2 inverses and one p x p Cholesky."""

    def __init__(self, engine: "Engine"):
        self.e = engine

    def _T(self, lam):
        e = self.e
        T = np.zeros((e.B, 2, 2))
        T[:, 0, 0] = T[:, 1, 1] = 1.0
        if e.spec.is_shared:
            T[:, e.spec.target, e.spec.source] = lam
        return T

    def prepare(self, stats: _Stats, lam) -> dict:
        T = self._T(np.asarray(lam, dtype=float))[:, None]  # (B, 1, 2, 2)
        Tt = np.swapaxes(T, -1, -2)
        return {
            "Om": Tt @ stats.Omega @ T,
            "Xi": stats.Xi @ T,
            "eta": (Tt @ stats.eta[..., None])[..., 0],
            "Phi": stats.Phi,
            "zeta": stats.zeta,
            "yWy": stats.yWy,
        }

    def evaluate(self, prep: dict, pd: np.ndarray):
        e = self.e
        p = e.p
        pdt = np.stack([pd[:, e.tslice(0)], pd[:, e.tslice(1)]], axis=-1)  # (B, R, 2)
        Q = prep["Om"].copy()
        Q[..., 0, 0] += pdt[..., 0]
        Q[..., 1, 1] += pdt[..., 1]
        a, b, d = Q[..., 0, 0], Q[..., 0, 1], Q[..., 1, 1]
        det = a * d - b * b
        ok = np.all(det > 0, axis=1) & np.all(a > 0, axis=1)
        det_safe = np.where(det > 0, det, 1.0)
        Qi = np.empty_like(Q)
        Qi[..., 0, 0] = d / det_safe
        Qi[..., 1, 1] = a / det_safe
        Qi[..., 0, 1] = Qi[..., 1, 0] = -b / det_safe
        Xi, eta = prep["Xi"], prep["eta"]
        K = Qi @ np.swapaxes(Xi, -1, -2)          # (B, R, 2, p)
        m = (Qi @ eta[..., None])[..., 0]          # (B, R, 2)
        S = prep["Phi"] - np.einsum("brpc,brcq->bpq", Xi, K)
        S[:, np.arange(p), np.arange(p)] += pd[:, :p]
        bS = prep["zeta"] - np.einsum("brpc,brc->bp", Xi, m)
        LS, okS = cholesky_batch(S)
        ok &= okS
        zS = np.linalg.solve(np.where(ok[:, None, None], LS, np.eye(p)), bS[..., None])[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            logdet = np.log(det_safe).sum(axis=1) + 2.0 * np.log(np.diagonal(LS, axis1=1, axis2=2)).sum(axis=1)
        quad = prep["yWy"] - np.einsum("brc,brc->b", eta, m) - np.einsum("bp,bp->b", zS, zS)
        # 2x2 Cholesky of each conditional covariance
        c00 = np.sqrt(np.clip(Qi[..., 0, 0], 0, None))
        c10 = np.divide(Qi[..., 1, 0], c00, out=np.zeros_like(c00), where=c00 > 0)
        c11 = np.sqrt(np.clip(Qi[..., 1, 1] - c10**2, 0, None))
        fac = {"LS": LS, "zS": zS, "K": K, "m": m, "c00": c00, "c10": c10, "c11": c11}
        return logdet, quad, fac, ok

    def draw(self, prep: dict, fac: dict, noise: np.ndarray) -> np.ndarray:
        e = self.e
        p = e.p
        phi = np.linalg.solve(np.swapaxes(fac["LS"], 1, 2), (fac["zS"] + noise[:, :p])[..., None])[..., 0]
        e0 = noise[:, e.tslice(0)]
        e1 = noise[:, e.tslice(1)]
        mean = fac["m"] - (fac["K"] @ phi[:, None, :, None])[..., 0]
        t0 = mean[..., 0] + fac["c00"] * e0
        t1 = mean[..., 1] + fac["c10"] * e0 + fac["c11"] * e1
        return np.concatenate([phi, t0, t1], axis=1)


def cholesky_batch(A):
    """Batched Cholesky with a per-problem fallback; returns (L, ok)."""
    try:
        return np.linalg.cholesky(A), np.ones(A.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        L = np.zeros_like(A)
        ok = np.zeros(A.shape[0], dtype=bool)
        for i in range(A.shape[0]):
            try:
                L[i] = np.linalg.cholesky(A[i])
                ok[i] = True
            except np.linalg.LinAlgError:
                pass
        return L, ok


@dataclass
class SamplerState:
    """Batched sampler state; leading dimension indexes problems.

    ``prep`` and ``fac`` cache the prepared linear system and its factor for
    the current hyperparameters and ``lam``.
    """

    hyper: dict[str, np.ndarray]
    lam: np.ndarray
    x: np.ndarray
    stats: _Stats
    prep: dict
    fac: dict
    ll: np.ndarray
    log_scale: np.ndarray
    omega_scale: np.ndarray | None
    rngs: list
    accepts: np.ndarray
    omega_accepts: np.ndarray | None = None
    fac_ok: np.ndarray | None = None  # per problem: fac is the natural-order factor of the current state
    ll_ok: bool = True

    def __post_init__(self):
        if self.fac_ok is None:
            self.fac_ok = np.ones(len(self.lam), dtype=bool)


class Engine:
    """Model internals for a batch of problems sharing one spec and graph."""

    def __init__(self, spec, basis: SpectralBasis, config: FitConfig, *, area=None, unit: _UnitArrays | None = None):
        self.spec = spec
        self.basis = basis
        self.config = config
        self.U = basis.U
        self.R = basis.n
        self.level = spec.level
        self.p = 2 if self.level == "area" else 4
        self.n = self.p + 2 * self.R
        self.area = area
        self.unit = unit
        self.B = len(area[0]) if area is not None else unit.region.shape[0]
        self.priors = spec.priors
        self.fixed = dict(config.fixed)
        self.per_region_omega = self.level == "unit" and spec.per_region_likelihood_variance
        if self.priors.fixed_effect_prior == "flat" and not config.likelihood:
            raise ModelError("a prior-only run needs a proper fixed-effect prior (fixed_effect_prior='gaussian')")
        coords = [("sigma", 0), ("sigma", 1)]
        if spec.is_spatial:
            coords += [("rho", 0), ("rho", 1)]
        if self.level == "unit":
            if not self.per_region_omega:
                coords += [("omega", 0), ("omega", 1)]
            coords += [("sigma_eps", 0), ("sigma_eps", 1)]
        self.coords = [c for c in coords if c[0] not in self.fixed]
        self.sample_lambda = spec.is_shared and "lambda" not in self.fixed
        self._area_stats = _area_stats(*area) if area is not None else None
        self._gspace = None
        self.solver = DenseSolver(self) if basis.spatial else BlockSolver(self)

    # -- slices -----------------------------------------------------------
    def tslice(self, c: int) -> slice:
        return slice(self.p + c * self.R, self.p + (c + 1) * self.R)

    # -- statistics ---------------------------------------------------------
    def omega_cell(self, hyper) -> np.ndarray:
        om = hyper["omega"]
        if om.ndim == 3:  # per region (B, 2, R)
            return np.take_along_axis(np.swapaxes(om, 1, 2), self.unit.region[:, :, None], axis=1)
        return np.broadcast_to(om[:, None, :], self.unit.n.shape)

    def stats(self, hyper) -> _Stats:
        if self.level == "area":
            return self._area_stats
        return _unit_stats(self.unit, self.omega_cell(hyper), hyper["sigma_eps"])

    def assemble(self, st: _Stats):
        """Precision ``H`` and linear term ``b`` over (fixed effects, total-effect modes)."""
        B, p, U = self.B, self.p, self.U
        H = np.zeros((B, self.n, self.n))
        b = np.zeros((B, self.n))
        H[:, :p, :p] = st.Phi
        F = np.einsum("brpc,rj->bpcj", st.Xi, U)
        for c in range(2):
            sc = self.tslice(c)
            H[:, :p, sc] = F[:, :, c]
            H[:, sc, :p] = np.swapaxes(F[:, :, c], 1, 2)
            b[:, sc] = st.eta[:, :, c] @ U
            for d in range(c, 2):
                if not np.any(st.Omega[:, :, c, d]):
                    continue
                G = U.T @ (st.Omega[:, :, c, d][:, :, None] * U)
                H[:, sc, self.tslice(d)] = G
                if d != c:
                    H[:, self.tslice(d), sc] = np.swapaxes(G, 1, 2)
        b[:, :p] = st.zeta
        return H, b

    def gspace(self, st: _Stats):
        """``assemble`` with the result cached at area level, where it never changes."""
        if self.level == "area":
            if self._gspace is None:
                self._gspace = self.assemble(st)
            return self._gspace
        return self.assemble(st)

    def shared_transform(self, H, b, lam):
        """Re-express ``H, b`` in own-effect modes: ``g_tgt = t_tgt + lam t_src``."""
        if not self.spec.is_shared:
            return H, b
        src, tgt = self.tslice(self.spec.source), self.tslice(self.spec.target)
        lam = np.asarray(lam, dtype=float)
        M = H.copy()
        M[:, :, src] += lam[:, None, None] * M[:, :, tgt]
        M[:, src, :] += lam[:, None, None] * M[:, tgt, :]
        bm = b.copy()
        bm[:, src] += lam[:, None] * bm[:, tgt]
        return M, bm

    # -- priors ---------------------------------------------------------------
    def prior_diag(self, hyper) -> np.ndarray:
        pd = np.zeros((self.B, self.n))
        if self.priors.fixed_effect_prior == "gaussian":
            pd[:, :self.p] = 1.0 / self.priors.fixed_effect_sd**2
        for c in range(2):
            if self.spec.is_spatial:
                d = np.maximum(self.basis.mode_variance(hyper["rho"][:, c]), 1e-12)
                pd[:, self.tslice(c)] = 1.0 / (hyper["sigma"][:, c, None] ** 2 * d)
            else:
                pd[:, self.tslice(c)] = 1.0 / hyper["sigma"][:, c, None] ** 2
        return pd

    def fixed_effect_term(self, pd) -> np.ndarray:
        if self.priors.fixed_effect_prior == "gaussian":
            return 0.5 * np.log(pd[:, :self.p]).sum(axis=1)
        return np.full(self.B, 0.5 * self.p * LOG_2PI)

    def log_prior_coord(self, name: str, value: np.ndarray) -> np.ndarray:
        """Log prior of one hyperparameter on its unconstrained scale."""
        pr = self.priors
        with np.errstate(divide="ignore", invalid="ignore"):
            if name == "rho":
                a, b = pr.rho_beta
                out = a * np.log(value) + b * np.log1p(-value) - betaln(a, b)
            else:
                rate = pr.omega_rate if name == "omega" else pr.sd_rate
                out = math.log(rate) - rate * value + np.log(value)
        return np.where(np.isfinite(out), out, -np.inf)

    @staticmethod
    def to_unconstrained(name, v):
        with np.errstate(divide="ignore"):
            return np.log(v) - np.log1p(-v) if name == "rho" else np.log(v)

    @staticmethod
    def from_unconstrained(name, z):
        return 1.0 / (1.0 + np.exp(-z)) if name == "rho" else np.exp(z)

    # -- collapsed likelihood -------------------------------------------------
    def log_marginal(self, stats: _Stats, prep: dict, hyper):
        """Log likelihood with the latent field integrated out, plus the factor."""
        pd = self.prior_diag(hyper)
        logdet, quad, fac, ok = self.solver.evaluate(prep, pd)
        return self.ll_from(stats, pd, logdet, quad, ok), fac

    def ll_from(self, stats: _Stats, pd, logdet, quad, ok) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = (stats.const + 0.5 * np.log(pd[:, self.p:]).sum(axis=1) + self.fixed_effect_term(pd)
                  - 0.5 * logdet - 0.5 * quad)
        return np.where(ok & np.isfinite(ll), ll, -np.inf)

    # -- state ----------------------------------------------------------------
    def init_state(self, seeds: Sequence) -> SamplerState:
        rngs = [s if isinstance(s, np.random.Generator) else np.random.default_rng(s) for s in seeds]
        if len(rngs) != self.B:
            raise ValueError("one seed per problem")
        B = self.B
        hyper = {}
        jitter = np.array([r.standard_normal(8) for r in rngs])
        hyper["sigma"] = 0.3 * np.exp(0.3 * jitter[:, 0:2])
        if self.spec.is_spatial:
            hyper["rho"] = 1.0 / (1.0 + np.exp(-0.5 * jitter[:, 2:4]))
        if self.level == "unit":
            act = self.unit.active
            wss = (self.unit.ss * act).sum(axis=1)
            wdf = (np.maximum(self.unit.n - 1, 0) * act).sum(axis=1)
            pooled = np.sqrt(np.divide(wss, wdf, out=np.ones_like(wss), where=wdf > 0))
            pooled = np.where(pooled > 0, pooled, 1.0) * np.exp(0.05 * jitter[:, 4:6])
            hyper["omega"] = np.repeat(pooled[:, :, None], self.R, axis=2) if self.per_region_omega else pooled
            hyper["sigma_eps"] = 0.3 * np.exp(0.3 * jitter[:, 6:8])
        for k, v in self.fixed.items():
            if k == "lambda":
                continue
            val = np.asarray(v, dtype=float)
            if val.ndim == 0:
                val = np.full(2, float(val))
            if k == "omega" and self.per_region_omega and val.ndim == 1:
                val = np.repeat(val[:, None], self.R, axis=1)
            hyper[k] = np.broadcast_to(val, (B,) + val.shape).copy()
        lam = np.full(B, float(self.fixed.get("lambda", 0.0)))
        stats = self.stats(hyper)
        prep = self.solver.prepare(stats, lam)
        ll, fac = self.log_marginal(stats, prep, hyper)
        k = len(self.coords)
        scale0 = math.log(self.config.proposal_sd) if self.config.proposal_sd > 0 else -np.inf
        state = SamplerState(
            hyper=hyper, lam=lam, x=np.zeros((B, self.n)), stats=stats, prep=prep, fac=fac, ll=ll,
            log_scale=np.full((B, k), scale0),
            omega_scale=(np.full((B, 2, self.R), math.log(0.3)) if self.per_region_omega else None),
            rngs=rngs, accepts=np.zeros((B, k)),
            omega_accepts=(np.zeros((B, 2, self.R)) if self.per_region_omega else None),
        )
        self.check_finite(state)
        return state

    def check_finite(self, state: SamplerState):
        bad = np.flatnonzero(~np.isfinite(state.ll))
        if bad.size:
            i = int(bad[0])
            dump = {k: np.asarray(v[i]).tolist() for k, v in state.hyper.items()}
            dump["lambda"] = float(state.lam[i])
            dump["problem"] = i
            raise SamplerDivergence(f"non-finite log density at the current state (problem {i})", dump)

    def refresh(self, state: SamplerState, restat: bool = True):
        """Recompute cached statistics, system and factor for the current state."""
        if restat:
            state.stats = self.stats(state.hyper)
            state.prep = self.solver.prepare(state.stats, state.lam)
        state.ll, state.fac = self.log_marginal(state.stats, state.prep, state.hyper)
        state.ll_ok = True
        state.fac_ok[:] = True
        self.check_finite(state)


def _normals(state: SamplerState, shape) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in state.rngs])


def _uniforms(state: SamplerState, k: int) -> np.ndarray:
    return np.stack([r.random(k) for r in state.rngs])


def _assign(mask: np.ndarray, dst: dict, src: dict) -> None:
    """In-place ``dst[k][mask] = src[k][mask]`` for every array of a dict."""
    for k, v in src.items():
        dst[k][mask] = v[mask]


def update_hyperparameters(engine: Engine, state: SamplerState, adapt_rate: float = 0.0) -> SamplerState:
    """One componentwise Metropolis sweep over the hyperparameters.

    ``adapt_rate > 0`` moves each log proposal scale towards the target
    acceptance rate (warmup only). With the dense solver, coordinates that
    only enter the prior of one outcome are evaluated on that outcome's block
    (see :meth:`DenseSolver.block_parts`).
    """
    k = len(engine.coords)
    if k == 0:
        return state
    noise = _normals(state, k)
    unif = _uniforms(state, k)
    solver = engine.solver
    done = set()

    def mh(j, ll_prop, lp_prop, lp_cur, moved):
        with np.errstate(invalid="ignore"):
            log_ratio = ll_prop + lp_prop - state.ll - lp_cur
        acc = moved & np.isfinite(ll_prop) & (np.log(unif[:, j]) < log_ratio)
        state.accepts[:, j] += acc
        if adapt_rate > 0:
            alpha = np.exp(np.minimum(0.0, np.where(np.isfinite(log_ratio), log_ratio, -np.inf)))
            state.log_scale[:, j] += adapt_rate * (alpha - engine.config.target_accept)
        return acc

    def propose(j, name, c):
        cur = state.hyper[name][:, c]
        step = np.exp(state.log_scale[:, j]) * noise[:, j]
        prop = engine.from_unconstrained(name, engine.to_unconstrained(name, cur) + step)
        hyp = dict(state.hyper)
        hyp[name] = state.hyper[name].copy()
        hyp[name][:, c] = prop
        lp_prop = engine.log_prior_coord(name, prop)
        moved = np.isfinite(lp_prop) & (step != 0)
        return hyp, lp_prop, engine.log_prior_coord(name, cur), moved

    if isinstance(solver, DenseSolver):
        for c in (0, 1):
            js = [j for j, (name, cc) in enumerate(engine.coords) if cc == c and name in ("sigma", "rho")]
            if not js:
                continue
            sc = engine.tslice(c)
            pd = engine.prior_diag(state.hyper)
            if c == 1 and state.fac_ok.all():
                L, ok = state.fac["L"], np.ones(engine.B, dtype=bool)
            else:
                L, ok = solver.factor(state.prep, pd, last=c)
            if not state.ll_ok:
                logdet, quad = solver.summarize(L)
                state.ll = engine.ll_from(state.stats, pd, logdet, quad, ok)
                state.ll_ok = True
                engine.check_finite(state)
            parts = solver.block_parts(L, pd[:, sc])
            s = engine.n - engine.R
            Lc_cur = L[:, s:, s:].copy()
            changed = np.zeros(engine.B, dtype=bool)
            for j in js:
                name = engine.coords[j][0]
                hyp, lp_prop, lp_cur, moved = propose(j, name, c)
                ll_prop = np.full(engine.B, -np.inf)
                if moved.any():
                    pdp = engine.prior_diag(hyp)
                    logdet, quad, Lc, okc = solver.block_evaluate(parts, pdp[:, sc])
                    ll_prop = engine.ll_from(state.stats, pdp, logdet, quad, okc)
                acc = mh(j, ll_prop, lp_prop, lp_cur, moved)
                if acc.any():
                    state.hyper[name][acc, c] = hyp[name][acc, c]
                    state.ll = np.where(acc, ll_prop, state.ll)
                    Lc_cur[acc] = Lc[acc]
                    changed |= acc
                done.add(j)
            if c == 1:
                state.fac = {"L": solver.splice(L, Lc_cur)}
                state.fac_ok[:] = True
            else:
                state.fac_ok &= ~changed

    for j, (name, c) in enumerate(engine.coords):
        if j in done:
            continue
        if not state.ll_ok:
            engine.refresh(state, restat=False)
        hyp, lp_prop, lp_cur, moved = propose(j, name, c)
        new_data = engine.level == "unit" and name in ("omega", "sigma_eps")
        ll_prop = np.full(engine.B, -np.inf)
        if moved.any():
            if new_data:
                stats = engine.stats(hyp)
                prep = solver.prepare(stats, state.lam)
            else:
                stats, prep = state.stats, state.prep
            ll_prop, fac = engine.log_marginal(stats, prep, hyp)
        acc = mh(j, ll_prop, lp_prop, lp_cur, moved)
        if acc.any():
            state.hyper[name] = _where(acc, hyp[name], state.hyper[name])
            state.ll = np.where(acc, ll_prop, state.ll)
            _assign(acc, state.fac, fac)
            state.fac_ok |= acc
            if new_data:
                state.stats = _where(acc, stats, state.stats)
                state.prep = prep if acc.all() else _where(acc, prep, state.prep)
    return state


def update_latent_field(engine: Engine, state: SamplerState) -> SamplerState:
    """Exact block draw of fixed effects and random-effect modes.

    Uses the factor cached for the current hyperparameters when it is valid.
    """
    if not state.fac_ok.all() or not state.ll_ok:
        engine.refresh(state, restat=False)
    if not np.all(np.isfinite(state.ll)):
        i = int(np.flatnonzero(~np.isfinite(state.ll))[0])
        raise NumericalError(f"conditional precision of the latent field is singular (problem {i}, "
                             "block: fixed effects and random effects)")
    noise = _normals(state, engine.n)
    state.x = engine.solver.draw(state.prep, state.fac, noise)
    return state


def update_lambda(engine: Engine, state: SamplerState) -> SamplerState:
    """Gaussian draw of ``lambda`` given the shared effect, then of the rest.

    Fixed effects and the target outcome's own effect are integrated out, so
    ``lambda`` is drawn given only the shared modes in ``state.x``; the fixed
    effects and target modes are then drawn given ``lambda`` from the same
    factor, leaving ``state.x`` a draw from its full conditional.
    """
    spec = engine.spec
    if not spec.is_shared:
        raise ModelError("lambda exists only in shared families")
    p = engine.p
    src, tgt = engine.tslice(spec.source), engine.tslice(spec.target)
    keep = np.r_[np.arange(p), np.arange(tgt.start, tgt.stop)]
    tsrc = state.x[:, src]
    H, b = engine.gspace(state.stats)
    Hk = H[:, keep]
    col = np.einsum("bkj,bj->bk", Hk[:, :, tgt], tsrc)
    ll_lam = np.einsum("bi,bij,bj->b", tsrc, H[:, tgt, tgt], tsrc)
    bk = b[:, keep] - np.einsum("bkj,bj->bk", Hk[:, :, src], tsrc)
    bl = np.einsum("bi,bi->b", tsrc, b[:, tgt] - np.einsum("bij,bj->bi", H[:, tgt, src], tsrc))
    pd = engine.prior_diag(state.hyper)
    m = len(keep)
    # augmented system: the factor's last row gives L^{-1} rhs; the corner
    # entry is only a placeholder large enough to keep it positive definite
    P = np.zeros((engine.B, m + 2, m + 2))
    P[:, :m, :m] = Hk[:, :, keep]
    P[:, np.arange(m), np.arange(m)] += pd[:, keep]
    P[:, :m, m] = P[:, m, :m] = col
    lam_prec = 1.0 / spec.priors.lambda_sd**2 if spec.priors.lambda_prior == "gaussian" else 0.0
    P[:, m, m] = ll_lam + lam_prec
    P[:, m + 1, :m] = P[:, :m, m + 1] = bk
    P[:, m + 1, m] = P[:, m, m + 1] = bl
    P[:, m + 1, m + 1] = 1e250
    L, ok = cholesky_batch(P)
    if not ok.all():
        raise NumericalError("lambda conditional is improper: the shared effect is zero under a flat lambda prior")
    noise = _normals(state, m + 1)
    lam = (L[:, m + 1, m] + noise[:, 0]) / L[:, m, m]
    rhs = L[:, m + 1, :m] - lam[:, None] * L[:, m, :m] + noise[:, 1:]
    x = state.x.copy()
    for i in range(engine.B):
        x[i, keep] = solve_triangular(L[i, :m, :m], rhs[i], lower=True, trans="T", check_finite=False)
    state.x = x
    state.lam = lam
    state.prep = engine.solver.prepare(state.stats, state.lam)
    state.ll_ok = False
    state.fac_ok[:] = False
    return state


def update_region_variances(engine: Engine, state: SamplerState, adapt_rate: float = 0.0) -> SamplerState:
    """Metropolis update of per-region likelihood sds given the latent field."""
    ua = engine.unit
    om = state.hyper["omega"]
    prop_noise = _normals(state, om.shape[1:])
    unif = _uniforms(state, int(np.prod(om.shape[1:]))).reshape(om.shape)
    step = np.exp(state.omega_scale) * prop_noise
    prop = om * np.exp(step)
    mean_cell = _cluster_means(engine, state)

    def local(omv):
        cell = np.take_along_axis(np.swapaxes(omv, 1, 2), ua.region[:, :, None], axis=1)
        act = ua.active
        n = np.where(act, ua.n, 1.0)
        om2 = cell**2
        d = state.hyper["sigma_eps"][:, None, :] ** 2 + om2 / n
        ll = np.where(act, -0.5 * (ua.n - 1.0) * (LOG_2PI + np.log(om2)) - ua.ss / (2 * om2) - 0.5 * np.log(n)
                      - 0.5 * (LOG_2PI + np.log(d)) - 0.5 * (ua.ybar - mean_cell) ** 2 / d, 0.0)
        return np.swapaxes(np.swapaxes(ua.onehot, 1, 2) @ ll, 1, 2)  # (B, 2, R)

    lr = (local(prop) + engine.log_prior_coord("omega", prop)) - (local(om) + engine.log_prior_coord("omega", om))
    acc = (np.log(unif) < lr) & (step != 0)
    state.hyper["omega"] = np.where(acc, prop, om)
    state.omega_accepts += acc
    if adapt_rate > 0:
        state.omega_scale += adapt_rate * (np.exp(np.minimum(0.0, lr)) - engine.config.target_accept)
    engine.refresh(state)
    return state


def _cluster_means(engine: Engine, state: SamplerState) -> np.ndarray:
    """Cluster-level means without cluster errors, (B, K, 2)."""
    ua = engine.unit
    g = _total_effects(engine, state)  # (B, 2, R)
    gk = np.take_along_axis(np.swapaxes(g, 1, 2), ua.region[:, :, None], axis=1)
    beta = state.x[:, None, 0:2]
    gamma = state.x[:, None, 2:4]
    return beta + ua.z[:, :, None] * gamma + gk


def _own_effects_modes(engine: Engine, state: SamplerState) -> np.ndarray:
    return np.stack([state.x[:, engine.tslice(c)] for c in range(2)], axis=1)  # (B, 2, R)


def _total_effects(engine: Engine, state: SamplerState) -> np.ndarray:
    s = _own_effects_modes(engine, state) @ engine.U.T
    if engine.spec.is_shared:
        return combine_shared(s, state.lam, engine.spec.source)
    return s


def _record(engine: Engine, state: SamplerState, q, want) -> dict[str, np.ndarray]:
    spec = engine.spec
    out = {}
    beta = state.x[:, 0:2]
    if want("beta"):
        out["beta"] = beta.copy()
    if engine.level == "unit" and want("gamma"):
        out["gamma"] = state.x[:, 2:4].copy()
    for name in ("sigma", "rho", "omega", "sigma_eps"):
        if name in state.hyper and want(name):
            out[name] = state.hyper[name].copy()
    if spec.is_shared and want("lambda"):
        out["lambda"] = state.lam.copy()
    t = _own_effects_modes(engine, state)
    if want("v_star") or want("u_star"):
        nv = _normals(state, t.shape[1:])
        nu = _normals(state, t.shape[1:])
        rho = state.hyper.get("rho", np.zeros((engine.B, 2)))
        v, u = engine.basis.split_modes(t, rho, state.hyper["sigma"], nv, nu)
        if want("v_star"):
            out["v_star"] = v @ engine.U.T
        if spec.is_spatial and want("u_star"):
            uu = u @ engine.U.T
            for comp in engine.basis.components:
                uu[..., comp] -= uu[..., comp].mean(axis=-1, keepdims=True)
            out["u_star"] = uu
    if want("mu"):
        s = t @ engine.U.T
        g = combine_shared(s, state.lam, spec.source) if spec.is_shared else s
        if engine.level == "area":
            out["mu"] = beta[:, :, None] + g
        elif q is not None:
            out["mu"] = aggregate_means(beta, state.x[:, 2:4], g, q)
        else:
            out["mu"] = np.full(g.shape, np.nan)
    if engine.level == "unit" and engine.config.store_cluster_effects and want("eps"):
        out["eps"] = _draw_cluster_effects(engine, state)
    return out


def _draw_cluster_effects(engine: Engine, state: SamplerState) -> np.ndarray:
    ua = engine.unit
    mean_cell = _cluster_means(engine, state)
    se2 = state.hyper["sigma_eps"][:, None, :] ** 2
    om2 = engine.omega_cell(state.hyper) ** 2
    n = np.where(ua.active, ua.n, 1.0)
    d = se2 + om2 / n
    m = np.where(ua.active, (ua.ybar - mean_cell) * se2 / d, 0.0)
    v = np.where(ua.active, se2 * (om2 / n) / d, se2)
    return m + np.sqrt(v) * _normals(state, ua.n.shape[1:])


def run_sampler(engine: Engine, seeds: Sequence, q=None) -> tuple[dict[str, np.ndarray], SamplerState]:
    """Warm up, then collect ``config.draws`` sweeps; samples shaped (B, kept, ...)."""
    cfg = engine.config
    state = engine.init_state(seeds)
    wanted = None if cfg.store is None else set(cfg.store)

    def want(name):
        return wanted is None or name in wanted

    def sweep(adapt_rate):
        update_hyperparameters(engine, state, adapt_rate)
        update_latent_field(engine, state)
        if engine.sample_lambda:
            update_lambda(engine, state)
        if engine.per_region_omega:
            update_region_variances(engine, state, adapt_rate)

    for it in range(cfg.warmup):
        sweep(min(1.0, 1.5 * (it + 1) ** -0.6))
    state.accepts[:] = 0
    if state.omega_accepts is not None:
        state.omega_accepts[:] = 0
    kept: dict[str, list] = {}
    for it in range(cfg.draws):
        sweep(0.0)
        if (it + 1) % cfg.thin == 0:
            for k, v in _record(engine, state, q, want).items():
                kept.setdefault(k, []).append(v)
    samples = {k: np.stack(v, axis=1) for k, v in kept.items()}
    return samples, state


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def spectral_basis(spec, graph: AdjacencyGraph) -> SpectralBasis:
    if spec.is_spatial:
        icar = scaled_icar(graph)
        if icar is not None:
            return SpectralBasis.bym2(icar)
    return SpectralBasis.iid(graph.n_nodes)


def chain_seed(seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(int(chain),))


def _direct_fit(spec, est: DirectEstimateSet, config: FitConfig, labels) -> ModelFit:
    R = est.n_regions
    out = np.full((config.chains, config.kept, 2, R), np.nan)
    for ch in range(config.chains):
        rng = np.random.default_rng(chain_seed(config.seed, ch))
        for r in range(R):
            idx, y, V = est.region_block(r)
            if idx.size == 0:
                continue
            V = np.diag(np.diag(V)) if spec.stage1_covariance_mode == "diagonal" else V
            draws = rng.multivariate_normal(y, V, size=config.kept, method="eigh")
            for j, c in enumerate(idx):
                out[ch, :, c, r] = draws[:, j]
    return ModelFit(spec, {"mu": out}, config.seed, config.chains, config, labels)


def fit_many(spec, datasets: Sequence, graph: AdjacencyGraph, q: RuralFractions | None = None,
             config: FitConfig | None = None, seeds: Sequence[int] | None = None,
             holdout: Sequence[int | None] | None = None) -> list[ModelFit]:
    """Fit ``spec`` to several datasets in one batch.

    ``seeds[i]`` seeds dataset ``i`` (default: ``config.seed``); chain ``c``
    draws from ``SeedSequence(seeds[i], spawn_key=(c,))``. ``holdout[i]``
    drops one region's data (0-based) from dataset ``i``.
    """
    config = config or FitConfig()
    datasets = list(datasets)
    seeds = list(seeds) if seeds is not None else [config.seed] * len(datasets)
    holdout = list(holdout) if holdout is not None else [None] * len(datasets)
    if not (len(seeds) == len(holdout) == len(datasets)):
        raise ValueError("datasets, seeds and holdout must have equal length")
    labels = graph.labels
    if spec.level == "unit":
        if not all(isinstance(d, SurveyDataset) for d in datasets):
            raise ModelError("unit-level models are fitted to survey datasets")
        qv = None if q is None else np.asarray(getattr(q, "q", q), dtype=float)
        if qv is not None and len(qv) != graph.n_nodes:
            raise ModelError("rural fractions must have one entry per region")
    else:
        if not all(isinstance(d, DirectEstimateSet) for d in datasets):
            raise ModelError("area-level models are fitted to direct estimates")
        datasets = [d if h is None else d.drop_region(h) for d, h in zip(datasets, holdout)]
        qv = None
        if spec.is_direct:
            return [_direct_fit(spec, d, replace(config, seed=int(s)), labels) for d, s in zip(datasets, seeds)]
    C = config.chains
    basis = spectral_basis(spec, graph)
    notes: list[str] = []
    rep = [d for d in datasets for _ in range(C)]
    rep_hold = [h for h in holdout for _ in range(C)]
    if spec.level == "area":
        arrays = _area_arrays(spec, rep, graph.n_nodes, config.variance_floor, config.likelihood, notes)
        engine = Engine(spec, basis, config, area=arrays)
    else:
        ua = _unit_arrays(rep, rep_hold, graph.n_nodes, config.likelihood)
        engine = Engine(spec, basis, config, unit=ua)
    problem_seeds = [chain_seed(s, c) for s in seeds for c in range(C)]
    samples, state = run_sampler(engine, problem_seeds, qv)
    acc = state.accepts / max(config.draws, 1)
    fits = []
    for i, s in enumerate(seeds):
        sl = slice(i * C, (i + 1) * C)
        smp = {k: v[sl] for k, v in samples.items()}
        rates = {f"{name}.{c + 1}": float(acc[sl, j].mean()) for j, (name, c) in enumerate(engine.coords)}
        if state.omega_accepts is not None:
            rates["omega(region)"] = float((state.omega_accepts[sl] / config.draws).mean())
        fits.append(ModelFit(spec, smp, int(s), C, replace(config, seed=int(s)), labels,
                             list(dict.fromkeys(notes)), rates))
    return fits


def fit(spec, data, graph: AdjacencyGraph, q: RuralFractions | None = None,
        config: FitConfig | None = None) -> ModelFit:
    """Fit one model; chains run as one batch."""
    config = config or FitConfig()
    if spec.level == "area" and isinstance(data, SurveyDataset):
        raise ModelError("area-level models take direct estimates; run direct estimation first")
    return fit_many(spec, [data], graph, q, config, [config.seed])[0]


# ---------------------------------------------------------------------------
# sample files
# ---------------------------------------------------------------------------

def sample_columns(samples: Mapping[str, np.ndarray]) -> list[tuple[str, str, tuple]]:
    """(column name, symbol, index) triples; indices are 1-based in names."""
    cols = []
    for name, arr in samples.items():
        shape = arr.shape[2:]
        for idx in np.ndindex(*shape) if shape else [()]:
            label = ".".join([name] + [str(i + 1) for i in idx])
            cols.append((label, name, idx))
    return cols


def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def write_samples_csv(fit: ModelFit, path) -> None:
    cols = sample_columns(fit.samples)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "draw"] + [c[0] for c in cols])
        chains, draws = next(iter(fit.samples.values())).shape[:2]
        flat = [fit.samples[name][(slice(None), slice(None)) + idx] for _, name, idx in cols]
        block = np.stack(flat, axis=-1) if flat else np.zeros((chains, draws, 0))
        for ch in range(chains):
            for d in range(draws):
                w.writerow([ch + 1, d + 1] + [_fmt(v) for v in block[ch, d]])


def read_samples_csv(path) -> dict[str, np.ndarray]:
    """Inverse of :func:`write_samples_csv`: arrays shaped (chains, draws, ...)."""
    import pandas as pd

    df = pd.read_csv(path, dtype=float, keep_default_na=True, float_precision="round_trip")
    chains = int(df["chain"].max())
    draws = int(df["draw"].max())
    groups: dict[str, list[tuple[tuple, str]]] = {}
    for col in df.columns[2:]:
        parts = col.split(".")
        groups.setdefault(parts[0], []).append((tuple(int(p) - 1 for p in parts[1:]), col))
    out = {}
    for name, items in groups.items():
        shape = tuple(max(ix[k] for ix, _ in items) + 1 for k in range(len(items[0][0])))
        arr = np.full((chains, draws) + shape, np.nan)
        for ix, col in items:
            arr[(slice(None), slice(None)) + ix] = df[col].to_numpy().reshape(chains, draws)
        out[name] = arr
    return out
