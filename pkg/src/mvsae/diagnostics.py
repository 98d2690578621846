"""Convergence diagnostics: split R-hat and effective sample size."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

RHAT_THRESHOLD = 1.05
SCALAR_PARAMS = ("beta", "gamma", "sigma", "rho", "lambda", "omega", "sigma_eps")


def _split(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def split_rhat(x: np.ndarray) -> float:
    """Split R-hat of draws shaped (chains, draws); nan for one chain or a constant."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 or x.shape[0] < 2 or x.shape[1] < 4:
        return float("nan")
    s = _split(x)
    m, n = s.shape
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean()
    Bn = means.var(ddof=1)  # B / n
    var_plus = (n - 1) / n * W + Bn
    if W == 0:
        return float("nan") if Bn == 0 else float("inf")
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return ac / n


def ess(x: np.ndarray) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence.

    A constant sample has ESS 1.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = _autocov(x)
    W = acov[:, 0].mean() * n / (n - 1)
    if m > 1:
        var_plus = W * (n - 1) / n + x.mean(axis=1).var(ddof=1)
    else:
        var_plus = W * (n - 1) / n
    if not var_plus > 0:
        return 1.0
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum adjacent pairs while positive, enforce monotone decrease
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    pairs = pairs[: neg[0]] if neg.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(max(m * n, 10)))
    return float(m * n / tau)


@dataclass
class DiagnosticsTable:
    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    chains: int = 1

    @property
    def healthy(self) -> bool:
        return not self.unhealthy_parameters()

    def unhealthy_parameters(self) -> list[str]:
        return [k for k, v in self.rows.items()
                if np.isfinite(v.get("rhat", np.nan)) and v["rhat"] > RHAT_THRESHOLD
                or v.get("rhat") == float("inf")]

    def low_ess(self, minimum: float = 10.0) -> list[str]:
        return [k for k, v in self.rows.items() if v["ess"] < minimum]

    def to_dict(self) -> dict:
        def clean(v):
            return None if not np.isfinite(v) else round(float(v), 6)

        return {
            "chains": self.chains,
            "healthy": self.healthy,
            "rhat_threshold": RHAT_THRESHOLD,
            "unhealthy": self.unhealthy_parameters(),
            "low_ess": self.low_ess(),
            "parameters": {k: {m: clean(v) for m, v in row.items()} for k, row in self.rows.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def diagnose(fit, names=None) -> DiagnosticsTable:
    """ESS and split R-hat for scalar parameters and ``mu``.

    Fixed hyperparameters and unavailable cells (all nan) are skipped. With a
    single chain only ESS is reported.
    """
    fixed = set(getattr(fit.config, "fixed", {}) or {})
    names = names or [n for n in SCALAR_PARAMS + ("mu",) if n in fit.samples and n not in fixed]
    table = DiagnosticsTable(chains=fit.chain_count)
    for name in names:
        arr = fit.samples[name]
        shape = arr.shape[2:]
        for idx in np.ndindex(*shape) if shape else [()]:
            x = arr[(slice(None), slice(None)) + idx]
            if np.all(np.isnan(x)):
                continue
            label = ".".join([name] + [str(i + 1) for i in idx])
            row = {"ess": ess(x)}
            if x.shape[0] > 1:
                row["rhat"] = split_rhat(x)
            table.rows[label] = row
    return table
