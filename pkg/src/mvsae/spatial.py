"""ICAR precision structures, BYM2 scaling and constrained sampling.

Scaling follows the usual BYM2 recipe: per connected component, take the
diagonal of the generalized inverse of the ICAR precision (the marginal
variances under the sum-to-zero constraint) and multiply the precision by
their geometric mean, so the scaled field has geometric-mean variance one.
Singleton components (islands) carry no ICAR field; BYM2 effects there are
pure iid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .survey import AdjacencyGraph

CONSTRAINT_TOL = 1e-10


@dataclass(frozen=True)
class IcarStructure:
    precision: sp.csr_matrix
    components: tuple[np.ndarray, ...]
    scaling_factor: np.ndarray  # per component; nan for singletons
    scaled: bool = False

    @property
    def n_nodes(self) -> int:
        return self.precision.shape[0]

    @cached_property
    def singleton(self) -> np.ndarray:
        """Node mask of islands (components of size one)."""
        mask = np.zeros(self.n_nodes, dtype=bool)
        for comp in self.components:
            if len(comp) == 1:
                mask[comp] = True
        return mask

    @property
    def has_field(self) -> bool:
        return any(len(c) > 1 for c in self.components)

    def dense(self) -> np.ndarray:
        return self.precision.toarray()

    @cached_property
    def _eigen(self):
        """Per-component spectral decomposition assembled into an R x R basis.

        Returns (U, kappa, island_mode): orthonormal columns, the ICAR marginal
        variance carried by each mode (1/eigenvalue, 0 on null modes) and a
        mask of island modes.
        """
        R = self.n_nodes
        Q = self.dense()
        U = np.zeros((R, R))
        kappa = np.zeros(R)
        island = np.zeros(R, dtype=bool)
        col = 0
        for comp in self.components:
            m = len(comp)
            if m == 1:
                U[comp[0], col] = 1.0
                island[col] = True
                col += 1
                continue
            vals, vecs = np.linalg.eigh(Q[np.ix_(comp, comp)])
            # smallest eigenvalue is the constant null vector of a connected Laplacian
            null = np.full(m, 1.0 / np.sqrt(m))
            U[comp, col] = null
            col += 1
            pos = vecs[:, 1:]
            pos = pos - np.outer(null, null @ pos)  # exact orthogonality to the constraint
            pos, _ = np.linalg.qr(pos)
            # re-diagonalize after the tiny correction
            small = pos.T @ Q[np.ix_(comp, comp)] @ pos
            ev, rot = np.linalg.eigh(0.5 * (small + small.T))
            pos = pos @ rot
            U[comp, col:col + m - 1] = pos
            kappa[col:col + m - 1] = 1.0 / ev
            col += m - 1
        return U, kappa, island

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._eigen

    def marginal_variances(self) -> np.ndarray:
        """Constrained marginal variances (diag of the generalized inverse); nan on islands."""
        U, kappa, island = self._eigen
        var = (U**2) @ kappa
        var[self.singleton] = np.nan
        return var


def build_icar_precision(graph: AdjacencyGraph) -> IcarStructure:
    """Unscaled ICAR precision ``Q = D - W``."""
    R = graph.n_nodes
    rows, cols = [], []
    for i, j in graph.edges:
        rows += [i, j]
        cols += [j, i]
    W = sp.csr_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(R, R))
    deg = np.asarray(W.sum(axis=1)).ravel()
    Q = (sp.diags(deg) - W).tocsr().astype(float)
    factors = np.array([np.nan if len(c) == 1 else 1.0 for c in graph.components])
    return IcarStructure(Q, graph.components, factors, scaled=False)


def compute_scaling(icar: IcarStructure) -> IcarStructure:
    """Scale each non-singleton component to geometric-mean marginal variance one."""
    if not icar.has_field:
        raise ValueError("no component with more than one node: nothing to scale (islands fall back to iid)")
    var = icar.marginal_variances()
    R = icar.n_nodes
    node_scale = np.ones(R)
    factors = np.full(len(icar.components), np.nan)
    for k, comp in enumerate(icar.components):
        if len(comp) == 1:
            continue
        f = float(np.exp(np.mean(np.log(var[comp]))))
        factors[k] = f
        node_scale[comp] = f
    # components are disjoint blocks, so row-scaling scales each block
    Q = sp.diags(node_scale) @ icar.precision
    prev = np.where(np.isnan(icar.scaling_factor), 1.0, icar.scaling_factor) if icar.scaled else 1.0
    total = factors * prev
    return IcarStructure(Q.tocsr(), icar.components, total if icar.scaled else factors, scaled=True)


def scaled_icar(graph: AdjacencyGraph) -> IcarStructure | None:
    """Scaled structure for ``graph``, or None if the graph has no edges."""
    icar = build_icar_precision(graph)
    return compute_scaling(icar) if icar.has_field else None


@dataclass(frozen=True)
class Bym2Effect:
    sigma: float
    rho: float
    v_star: np.ndarray
    u_star: np.ndarray

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


def check_sum_to_zero(u: np.ndarray, components=None, tol: float = CONSTRAINT_TOL) -> None:
    u = np.asarray(u, dtype=float)
    groups = components if components is not None else (np.arange(len(u)),)
    for comp in groups:
        s = float(np.sum(u[comp]))
        if abs(s) > tol * max(1.0, len(comp)):
            raise ValueError(f"u_star violates sum-to-zero on component starting at node {comp[0] + 1}: sum = {s:.3g}")


def realize_bym2(effect: Bym2Effect, icar: IcarStructure | None = None) -> np.ndarray:
    """``s = sigma * (sqrt(1 - rho) v* + sqrt(rho) u*)``.

    With ``icar`` given, the constraint is checked per component and island
    nodes take the whole variance on the iid part.
    """
    v = np.asarray(effect.v_star, dtype=float)
    u = np.asarray(effect.u_star, dtype=float)
    if v.shape != u.shape:
        raise ValueError("v_star and u_star must have the same length")
    check_sum_to_zero(u, None if icar is None else [c for c in icar.components if len(c) > 1])
    a = np.sqrt(1.0 - effect.rho)
    b = np.sqrt(effect.rho)
    if icar is not None:
        island = icar.singleton
        return effect.sigma * np.where(island, v, a * v + b * u)
    return effect.sigma * (a * v + b * u)


def sample_constrained_icar(icar: IcarStructure, rng_seed) -> np.ndarray:
    """Draw u* from the scaled ICAR density under per-component sum-to-zero.

    Sampling happens in the positive eigenspace, so the constraint holds to
    rounding. Islands get 0.
    """
    if not icar.has_field:
        return np.zeros(icar.n_nodes)
    if not icar.scaled:
        raise ValueError("sample from a scaled structure (see compute_scaling)")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    U, kappa, _ = icar.basis()
    z = rng.standard_normal(len(kappa)) * np.sqrt(kappa)
    u = U @ z
    # remove rounding drift from the constraint
    for comp in icar.components:
        if len(comp) > 1:
            u[comp] -= u[comp].mean()
    return u


def scaling_diagnostics(icar: IcarStructure, graph: AdjacencyGraph | None = None) -> dict:
    var = icar.marginal_variances()
    labels = graph.labels if graph is not None else [str(i + 1) for i in range(icar.n_nodes)]
    return {
        "scaled": icar.scaled,
        "components": [
            {
                "nodes": [labels[i] for i in comp],
                "scaling_factor": None if len(comp) == 1 else float(icar.scaling_factor[k]),
                "island": len(comp) == 1,
            }
            for k, comp in enumerate(icar.components)
        ],
        "marginal_variances": {labels[i]: (None if np.isnan(v) else float(v)) for i, v in enumerate(var)},
    }


def write_scaling_diagnostics(icar: IcarStructure, path, graph: AdjacencyGraph | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scaling_diagnostics(icar, graph), fh, indent=2)


class SpectralBasis:
    """Orthonormal basis diagonalizing every BYM2 prior covariance on a graph.

    For mixing ``rho``, mode ``j`` of a standardized effect has variance
    ``d_j = (1 - rho) + rho * kappa_j`` (``1`` on island modes). The iid basis
    uses the identity and ``d_j = 1``.
    """

    def __init__(self, U: np.ndarray, kappa: np.ndarray, island_mode: np.ndarray, spatial: bool,
                 components: tuple = ()):
        self.U = U
        self.components = tuple(components)  # non-singleton components (sum-to-zero groups)
        self.kappa = kappa
        self.island_mode = island_mode
        self.spatial = spatial
        self.n = U.shape[0]

    @classmethod
    def iid(cls, R: int) -> "SpectralBasis":
        return cls(np.eye(R), np.zeros(R), np.ones(R, dtype=bool), spatial=False)

    @classmethod
    def bym2(cls, icar: IcarStructure) -> "SpectralBasis":
        U, kappa, island = icar.basis()
        return cls(U, kappa, island, spatial=True,
                   components=tuple(c for c in icar.components if len(c) > 1))

    def mode_variance(self, rho) -> np.ndarray:
        """``d`` for each mode; ``rho`` may be an array (broadcast over leading dims)."""
        rho = np.asarray(rho, dtype=float)[..., None]
        d = (1.0 - rho) + rho * self.kappa
        return np.where(self.island_mode, 1.0, d)

    def split_modes(self, t: np.ndarray, rho, sigma, noise_v: np.ndarray, noise_u: np.ndarray):
        """Draw standardized (v*, u*) mode coordinates given an effect's modes ``t``.

        ``t`` holds ``U' s`` for ``s = sigma (sqrt(1-rho) v* + sqrt(rho) u*)``;
        ``noise_*`` are standard normals shaped like ``t``. Given ``t`` only the
        split between the two parts is random.
        """
        x = np.asarray(t, dtype=float) / np.asarray(sigma, dtype=float)[..., None]
        if not self.spatial:
            return x, np.zeros_like(x)
        rho = np.asarray(rho, dtype=float)[..., None]
        a = np.where(self.island_mode, 1.0, np.sqrt(1.0 - rho))
        b = np.sqrt(rho)
        kap = np.where(self.island_mode, 0.0, self.kappa)
        d = a**2 + b**2 * kap
        v = a * x / d + np.sqrt(np.clip(1.0 - a**2 / d, 0.0, None)) * noise_v
        has_u = kap > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(has_u, (x - a * v) / np.where(b > 0, b, 1.0), 0.0)
        # rho == 0: u is untouched by s and comes from its prior
        u = np.where(has_u & (b == 0), np.sqrt(kap) * noise_u, u)
        return v, u
