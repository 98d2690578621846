"""Candidate model specifications and predictor assembly.

Area-level families model direct estimates ``y_r ~ N_2(mu_r, V_r)``; unit-level
families model individual outcomes with a rural fixed effect and cluster
errors. In shared families one outcome's total random effect also enters the
other outcome's predictor, scaled by ``lambda``. ``shared_direction`` names the
outcome whose effect is shared (default 2: ``s_2`` enters outcome 1).

Latent states are plain mappings of arrays::

    beta (2,)  gamma (2,)  lambda ()  sigma (2,)  rho (2,)
    v_star (2, R)  u_star (2, R)  eps (K, 2)

A precomputed total effect ``s`` (2, R) may stand in for the standardized
components.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

AREA_FAMILIES = (
    "direct",
    "uni_iid",
    "uni_bym",
    "biv_nonshared_iid",
    "biv_nonshared_bym",
    "biv_shared_iid",
    "biv_shared_bym",
)
UNIT_FAMILIES = ("iid_nonshared", "bym_nonshared", "iid_shared", "bym_shared")
STAGE2_AREA_FAMILIES = AREA_FAMILIES[1:]

_ALIASES = {
    "Direct": "direct",
    "UniIID": "uni_iid",
    "UniBYM": "uni_bym",
    "BivNonsharedIID": "biv_nonshared_iid",
    "BivNonsharedBYM": "biv_nonshared_bym",
    "BivSharedIID": "biv_shared_iid",
    "BivSharedBYM": "biv_shared_bym",
    "IIDNonshared": "iid_nonshared",
    "BYMNonshared": "bym_nonshared",
    "IIDShared": "iid_shared",
    "BYMShared": "bym_shared",
}


class ModelError(ValueError):
    pass


class MissingLatentError(ModelError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"latent state is missing block {name!r}")

    def __str__(self):
        return self.args[0]


def canonical_family(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in AREA_FAMILIES and name not in UNIT_FAMILIES:
        raise ModelError(f"unknown model family {name!r}; choose from {AREA_FAMILIES + UNIT_FAMILIES}")
    return name


@dataclass(frozen=True)
class PriorConfig:
    """Priors. Standard deviations get PC priors ``P(sd > U) = alpha``.

    ``omega_pc_u`` sets the threshold for the individual-level likelihood sd,
    which lives on the outcome scale rather than the random-effect scale.
    ``fixed_effect_prior="gaussian"`` (sd ``fixed_effect_sd``) replaces the
    flat prior, e.g. for prior-only runs.
    """

    sd_pc_u: float = 1.0
    sd_pc_alpha: float = 0.01
    rho_beta: tuple[float, float] = (1.0, 1.0)
    lambda_prior: str = "gaussian"
    lambda_sd: float = 31.62
    fixed_effect_prior: str = "flat"
    fixed_effect_sd: float = 10.0
    omega_pc_u: float = 10.0
    omega_pc_alpha: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "rho_beta", tuple(float(v) for v in self.rho_beta))
        if not self.sd_pc_u > 0 or not self.omega_pc_u > 0:
            raise ModelError("PC prior threshold U must be positive")
        if not (0 < self.sd_pc_alpha < 1 and 0 < self.omega_pc_alpha < 1):
            raise ModelError("PC prior alpha must lie in (0, 1)")
        if len(self.rho_beta) != 2 or min(self.rho_beta) <= 0:
            raise ModelError("Beta prior parameters must be positive")
        if self.lambda_prior not in ("flat", "gaussian"):
            raise ModelError("lambda_prior must be 'flat' or 'gaussian'")
        if not self.lambda_sd > 0:
            raise ModelError("lambda prior sd must be positive")
        if self.fixed_effect_prior not in ("flat", "gaussian"):
            raise ModelError("fixed_effect_prior must be 'flat' or 'gaussian'")
        if not self.fixed_effect_sd > 0:
            raise ModelError("fixed effect prior sd must be positive")

    @property
    def sd_rate(self) -> float:
        return -math.log(self.sd_pc_alpha) / self.sd_pc_u

    @property
    def omega_rate(self) -> float:
        return -math.log(self.omega_pc_alpha) / self.omega_pc_u

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho_beta"] = list(self.rho_beta)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelError(f"unknown prior fields: {sorted(unknown)}")
        return cls(**d)


class _SpecMixin:
    family: str
    shared_direction: int

    @property
    def is_shared(self) -> bool:
        return "shared" in self.family and "nonshared" not in self.family

    @property
    def is_spatial(self) -> bool:
        return "bym" in self.family

    @property
    def source(self) -> int:
        """0-based index of the outcome whose effect is shared."""
        return self.shared_direction - 1

    @property
    def target(self) -> int:
        return 2 - self.shared_direction

    def _check_common(self, families):
        object.__setattr__(self, "family", canonical_family(self.family))
        if self.family not in families:
            raise ModelError(f"family {self.family!r} is not valid at the {self.level} level")
        if self.shared_direction not in (1, 2):
            raise ModelError("shared_direction must be 1 or 2")
        if not isinstance(self.priors, PriorConfig):
            raise ModelError("priors must be a PriorConfig")


@dataclass(frozen=True)
class AreaModelSpec(_SpecMixin):
    """Area-level model. The stage-1 covariance mode is fixed by the family."""

    family: str
    shared_direction: int = 2
    priors: PriorConfig = field(default_factory=PriorConfig)

    level = "area"

    def __post_init__(self):
        self._check_common(AREA_FAMILIES)

    @property
    def stage1_covariance_mode(self) -> str:
        return "diagonal" if self.family.startswith("uni_") else "full"

    @property
    def is_direct(self) -> bool:
        return self.family == "direct"

    @property
    def name(self) -> str:
        return self.family


@dataclass(frozen=True)
class UnitModelSpec(_SpecMixin):
    family: str
    shared_direction: int = 2
    per_region_likelihood_variance: bool = False
    priors: PriorConfig = field(default_factory=PriorConfig)

    level = "unit"
    is_direct = False

    def __post_init__(self):
        self._check_common(UNIT_FAMILIES)

    @property
    def name(self) -> str:
        return self.family


ModelSpec = AreaModelSpec | UnitModelSpec


# ---------------------------------------------------------------------------
# predictor assembly
# ---------------------------------------------------------------------------

def _need(latent: Mapping, name: str):
    if name not in latent:
        raise MissingLatentError(name)
    return np.asarray(latent[name], dtype=float)


def standardized_effects(spec, latent: Mapping) -> np.ndarray:
    """Own random effects ``s`` (2, R) before sharing."""
    if "s" in latent:
        return np.asarray(latent["s"], dtype=float)
    sigma = _need(latent, "sigma")
    v = _need(latent, "v_star")
    if not spec.is_spatial:
        return sigma[:, None] * v
    rho = _need(latent, "rho")
    u = _need(latent, "u_star")
    return sigma[:, None] * (np.sqrt(1.0 - rho)[:, None] * v + np.sqrt(rho)[:, None] * u)


def combine_shared(s: np.ndarray, lam, source: int, shared: bool = True) -> np.ndarray:
    """Total effects ``g`` from own effects ``s`` (..., 2, R).

    ``lam`` broadcasts over leading dimensions.
    """
    g = np.array(s, dtype=float, copy=True)
    if shared:
        lam = np.asarray(lam, dtype=float)[..., None]
        g[..., 1 - source, :] = g[..., 1 - source, :] + lam * s[..., source, :]
    return g


def total_effects(spec, latent: Mapping) -> np.ndarray:
    s = standardized_effects(spec, latent)
    if spec.is_shared:
        return combine_shared(s, _need(latent, "lambda"), spec.source)
    return s


def area_linear_predictor(spec: AreaModelSpec, latent: Mapping, region: int) -> np.ndarray:
    """Mean vector ``mu_r`` (length 2) for one region (0-based)."""
    if spec.is_direct:
        return _need(latent, "mu")[:, region].copy()
    beta = _need(latent, "beta")
    g = total_effects(spec, latent)
    return beta + g[:, region]


def unit_linear_predictor(spec: UnitModelSpec, latent: Mapping, region: int, cluster: int,
                          rural: bool) -> np.ndarray:
    """Individual-level mean for a record in ``cluster`` (row of ``latent['eps']``)."""
    beta = _need(latent, "beta")
    gamma = _need(latent, "gamma")
    eps = _need(latent, "eps")
    g = total_effects(spec, latent)
    return beta + float(rural) * gamma + g[:, region] + eps[cluster]


def aggregate_means(beta, gamma, g, q) -> np.ndarray:
    """Vectorized urban/rural aggregation.

    ``beta``, ``gamma``: (..., 2); ``g``: (..., 2, R); ``q``: (R,). Returns
    ``(1 - q)(beta + g) + q(beta + gamma + g)`` with shape (..., 2, R).
    """
    beta = np.asarray(beta, dtype=float)[..., :, None]
    gamma = np.asarray(gamma, dtype=float)[..., :, None]
    q = np.asarray(q, dtype=float)
    return beta + q * gamma + np.asarray(g, dtype=float)


def aggregate_region_mean(spec: UnitModelSpec, latent: Mapping, q, region: int) -> np.ndarray:
    """Area mean for ``region``: cluster errors are excluded."""
    qv = getattr(q, "q", q)
    if qv is None or region >= len(qv) or not np.isfinite(qv[region]):
        raise ModelError(f"rural fraction missing for region {region + 1}")
    beta = _need(latent, "beta")
    gamma = _need(latent, "gamma")
    g = total_effects(spec, latent)[:, region]
    qr = float(qv[region])
    return (1.0 - qr) * (beta + g) + qr * (beta + gamma + g)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

def pc_prior_rate(U: float, alpha: float) -> float:
    return -math.log(alpha) / U


def pc_prior_log_density(sd, U: float = 1.0, alpha: float = 0.01):
    """Log of the exponential PC density on a standard deviation."""
    theta = pc_prior_rate(U, alpha)
    sd = np.asarray(sd, dtype=float)
    out = np.where(sd >= 0, math.log(theta) - theta * sd, -np.inf)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# shared direction
# ---------------------------------------------------------------------------

def reparameterize_shared_direction(spec):
    """Flip which outcome's effect is shared.

    The two directions describe the same family of bivariate covariances. For
    iid effects with sds ``(s1, s2)`` sharing outcome 2, the matching
    parameters under the flipped direction are::

        s1'^2 = s1^2 + lambda^2 s2^2
        lambda' = lambda s2^2 / s1'^2
        s2'^2 = s2^2 - lambda'^2 s1'^2

    (see :func:`flipped_iid_parameters`). With BYM2 effects the spatial
    structures differ per component, so the correspondence is approximate.
    """
    if not spec.is_shared:
        raise ModelError(f"family {spec.family!r} has no shared component to flip")
    return replace(spec, shared_direction=3 - spec.shared_direction)


def flipped_iid_parameters(sigma, lam: float, source: int = 1):
    """Covariance-matching sds and coefficient after flipping (iid case)."""
    s_src, s_tgt = float(sigma[source]), float(sigma[1 - source])
    tgt_new = s_tgt**2 + lam**2 * s_src**2
    lam_new = lam * s_src**2 / tgt_new
    src_new = s_src**2 - lam_new**2 * tgt_new
    out = np.empty(2)
    out[1 - source] = math.sqrt(tgt_new)
    out[source] = math.sqrt(max(src_new, 0.0))
    return out, lam_new


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def spec_to_dict(spec) -> dict:
    d = {"level": spec.level, "family": spec.family, "priors": spec.priors.to_dict()}
    if spec.shared_direction != 2:
        d["shared_direction"] = spec.shared_direction
    if spec.level == "unit" and spec.per_region_likelihood_variance:
        d["per_region_likelihood_variance"] = True
    return d


def spec_from_dict(d: Mapping):
    d = dict(d)
    level = d.pop("level", None)
    family = d.pop("family", None)
    if family is None:
        raise ModelError("model spec needs a 'family'")
    family = canonical_family(family)
    if level is None:
        level = "unit" if family in UNIT_FAMILIES else "area"
    priors = PriorConfig.from_dict(d.pop("priors", {}) or {})
    direction = int(d.pop("shared_direction", 2))
    if level == "area":
        if d:
            raise ModelError(f"unknown area spec fields: {sorted(d)}")
        return AreaModelSpec(family, direction, priors)
    if level == "unit":
        per_region = bool(d.pop("per_region_likelihood_variance", False))
        if d:
            raise ModelError(f"unknown unit spec fields: {sorted(d)}")
        return UnitModelSpec(family, direction, per_region, priors)
    raise ModelError(f"level must be 'area' or 'unit', got {level!r}")


def spec_to_json(spec) -> str:
    return json.dumps(spec_to_dict(spec), sort_keys=True)


def spec_from_json(text: str):
    try:
        return spec_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ModelError(f"model spec is not valid JSON: {exc}") from exc


def load_spec(path):
    with open(path, encoding="utf-8") as fh:
        return spec_from_json(fh.read())


def model_spec(family: str, **kwargs):
    """Build an area or unit spec from a family name."""
    family = canonical_family(family)
    if family in UNIT_FAMILIES:
        return UnitModelSpec(family, **kwargs)
    return AreaModelSpec(family, **kwargs)
